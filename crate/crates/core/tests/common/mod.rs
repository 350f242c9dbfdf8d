#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use adventure_core::genai::{extract_reformulation_query, is_reformulation_prompt};
use adventure_core::graph::{Concept, Exercise, Hint, KnowledgeGraph, Level, Statements, TestCase};
use adventure_core::llm::{Completion, CompletionRequest, LlmClient, LlmError};

pub const SAMPLE_GRAPH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/resources/sample_graph.json");

pub fn sample_graph() -> KnowledgeGraph {
    adventure_core::graph::load_graph(SAMPLE_GRAPH).expect("sample graph loads")
}

/// Identity-language graph: the program text is its own output, so tests
/// need no interpreter. `per_concept` exercises spread across the levels.
pub fn identity_graph(concepts: &[&str], per_concept: usize) -> KnowledgeGraph {
    let mut cs = Vec::new();
    let mut es = Vec::new();
    for (order, c) in concepts.iter().enumerate() {
        cs.push(Concept {
            id: (*c).to_string(),
            name: format!("Concept {c}"),
            upper_concept: None,
            language: "identity".into(),
            order_index: order as u32,
        });
        for i in 0..per_concept {
            let id = format!("{c}-{i:02}");
            let level = Level::ALL[i * 3 / per_concept.max(1)];
            es.push(Exercise {
                id: id.clone(),
                concept_id: (*c).to_string(),
                language_id: "identity".into(),
                level,
                statements: Statements {
                    en: format!("Print the token for {id} at the {level} level"),
                    th: None,
                },
                hints: vec![Hint {
                    concept: (*c).to_string(),
                    points: vec!["print_statement".into()],
                }],
                required_markers: vec![],
                test_cases: vec![TestCase {
                    inputs: vec![],
                    expected_output: vec![format!("out_{id}")],
                }],
                reference_solution: format!("out_{id}"),
                difficulty: None,
            });
        }
    }
    KnowledgeGraph::from_parts(cs, es)
}

/// A model that ignores its instructions: with probability `p_solved` it
/// recommends an exercise the learner already solved (read from a shared
/// cell the test keeps up to date), otherwise a random graph exercise,
/// and occasionally it fails or answers without a recommendation.
pub struct AdversarialLlm {
    pub solved: Arc<Mutex<BTreeSet<String>>>,
    pub ids: Vec<String>,
    pub p_solved: f64,
    rng: Mutex<SplitMix64>,
}

impl AdversarialLlm {
    pub fn new(ids: Vec<String>, p_solved: f64, seed: u64) -> Self {
        Self {
            solved: Arc::new(Mutex::new(BTreeSet::new())),
            ids,
            p_solved,
            rng: Mutex::new(SplitMix64::seed_from_u64(seed)),
        }
    }
}

impl LlmClient for AdversarialLlm {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        if is_reformulation_prompt(&req.prompt) {
            return Ok(Completion::text(extract_reformulation_query(&req.prompt)));
        }
        let mut rng = self.rng.lock();
        let roll: f64 = rng.random();
        if roll < 0.03 {
            return Err(LlmError::Timeout);
        }
        if roll < 0.06 {
            return Ok(Completion::text("Looks fine to me. Keep going!"));
        }
        let solved = self.solved.lock();
        let id = if !solved.is_empty() && rng.random_bool(self.p_solved) {
            solved
                .iter()
                .nth(rng.random_range(0..solved.len()))
                .cloned()
                .expect("index in range")
        } else {
            self.ids[rng.random_range(0..self.ids.len())].clone()
        };
        Ok(Completion::text(format!(
            "The submission has an issue in the output.\n\nRecommended Exercise:\n\nQuestion ID: {id}\nContent: practise this\n\nRecommended Reason: it targets the same knowledge point."
        )))
    }
}
