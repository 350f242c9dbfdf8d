mod common;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use adventure_core::genai::{
    build_composite_prompt, parse_feedback, render_history, FileMemoryStore, LlmResponse,
    MemoryStore, PromptBundle, Role, Turn,
};

use common::sample_graph;

const WORDS: &[&str] = &[
    "your", "loop", "misses", "the", "final", "case", "Question", "ID", "consider", "else",
    "branch", "output", "printing", "variable", "great", "work", ":", "**", "Content:", "try",
    "again",
];

fn prose(rng: &mut SplitMix64, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out = Vec::new();
    for i in 0..n {
        out.push(*WORDS.choose(rng).unwrap());
        if i % 9 == 8 {
            out.push("\n");
        }
    }
    out.join(" ")
}

fn synthetic_response(rng: &mut SplitMix64, id: &str, decoy: &str) -> String {
    let mut text = prose(rng, 60);
    text.push('\n');
    if rng.random_bool(0.3) {
        // A restated format block before the filled one.
        text.push_str(&format!(
            "Recommended Exercise:\nQuestion ID: {decoy}\nContent:\n\n"
        ));
    }
    let label = [
        "Question ID:",
        "**Question ID:**",
        "- Question ID:",
        "Question ID: ",
    ][rng.random_range(0..4)];
    text.push_str(&format!(
        "Recommended Exercise:\n\n{label} {id}\nContent: {}\n\nRecommended Reason: {}\n",
        prose(rng, 12),
        prose(rng, 25)
    ));
    text
}

#[test]
fn planted_ids_are_always_recovered() {
    let kg = sample_graph();
    let ids: Vec<&str> = kg.exercises().iter().map(|e| e.id.as_str()).collect();
    let mut rng = SplitMix64::seed_from_u64(500);
    for i in 0..500 {
        let id = *ids.choose(&mut rng).unwrap();
        let decoy = *ids.choose(&mut rng).unwrap();
        let text = synthetic_response(&mut rng, id, decoy);
        let resp = LlmResponse {
            text: text.clone(),
            latency_ms: 0,
            truncated: false,
        };
        let parsed =
            parse_feedback(&resp, &kg).unwrap_or_else(|e| panic!("fixture {i}: {e}\n{text}"));
        assert_eq!(
            parsed.recommended_exercise_id.as_deref(),
            Some(id),
            "fixture {i}\n{text}"
        );
    }
}

#[test]
fn composite_prompt_leaves_no_known_placeholder() {
    let mut rng = SplitMix64::seed_from_u64(1);
    for _ in 0..200 {
        let bundle = PromptBundle {
            question_content: prose(&mut rng, 20),
            correct_code: prose(&mut rng, 20),
            submitted_code: prose(&mut rng, 20),
            chat_history: prose(&mut rng, 20),
            context: prose(&mut rng, 20),
        };
        let p = build_composite_prompt(&bundle);
        for v in [
            "question_content",
            "correct_code",
            "submitted_code",
            "chat_history",
            "context",
        ] {
            assert!(!p.contains(&format!("{{{v}}}")), "{v} left unfilled");
        }
        for value in [
            &bundle.question_content,
            &bundle.correct_code,
            &bundle.submitted_code,
        ] {
            assert!(p.contains(value.as_str()));
        }
    }
}

fn chain(bytes: &[u8]) -> Vec<[u8; 32]> {
    let mut prev = [0u8; 32];
    bytes
        .split_inclusive(|b| *b == b'\n')
        .map(|line| {
            let mut h = Sha256::new();
            h.update(prev);
            h.update(line);
            prev = h.finalize().into();
            prev
        })
        .collect()
}

#[test]
fn chat_memory_is_append_only() {
    let dir = tempfile::tempdir().unwrap();
    let store = FileMemoryStore::new(dir.path()).unwrap();
    let mut rng = SplitMix64::seed_from_u64(9);
    let mut seen: Vec<[u8; 32]> = Vec::new();
    for ts in 0..60 {
        let learner = ["ann", "bo"][rng.random_range(0..2)];
        let role = if rng.random_bool(0.5) {
            Role::Learner
        } else {
            Role::Assistant
        };
        store
            .append(
                learner,
                &Turn {
                    role,
                    text: prose(&mut rng, 15),
                    ts,
                },
            )
            .unwrap();
        if learner == "ann" {
            let now = chain(&std::fs::read(store.path_for("ann")).unwrap());
            assert_eq!(&now[..seen.len()], &seen[..], "earlier turns changed");
            assert_eq!(now.len(), seen.len() + 1);
            seen = now;
        }
        // Reading and rendering never mutates the file.
        let before = std::fs::read(store.path_for(learner)).unwrap();
        let memory = store.load(learner).unwrap();
        let _ = render_history(&memory, 6);
        assert_eq!(std::fs::read(store.path_for(learner)).unwrap(), before);
    }
}
