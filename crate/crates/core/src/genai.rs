//! Prompt assembly, model-response parsing and per-learner chat memory.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::llm::{CompletionRequest, LlmClient, LlmError};

/// Composite grading/explanation/recommendation prompt.
pub const COMPOSITE_TEMPLATE: &str = include_str!("../resources/composite_prompt_v1.txt");
pub const COMPOSITE_TEMPLATE_VERSION: &str = "composite_prompt_v1";
/// Turns a possibly ambiguous learner query into a standalone question.
pub const REFORMULATION_TEMPLATE: &str = include_str!("../resources/reformulation_prompt_v1.txt");

const COMPOSITE_VARS: [&str; 5] = [
    "question_content",
    "correct_code",
    "submitted_code",
    "chat_history",
    "context",
];
const REFORMULATION_VARS: [&str; 2] = ["chat_history", "raw_query"];
const NO_PRIOR_CONTEXT: &str = "(no prior context)";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub question_content: String,
    pub correct_code: String,
    pub submitted_code: String,
    pub chat_history: String,
    pub context: String,
}

impl PromptBundle {
    fn get(&self, name: &str) -> &str {
        match name {
            "question_content" => &self.question_content,
            "correct_code" => &self.correct_code,
            "submitted_code" => &self.submitted_code,
            "chat_history" => &self.chat_history,
            "context" => &self.context,
            _ => "",
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Var(&'a str),
}

/// Splits a template into literal text and known `{name}` placeholders.
fn pieces<'a>(template: &'a str, names: &[&str]) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    let mut rest = template;
    let mut literal_start = 0;
    let mut offset = 0;
    while let Some(i) = rest.find('{') {
        let tail = &rest[i + 1..];
        let hit = names
            .iter()
            .find(|n| tail.starts_with(**n) && tail[n.len()..].starts_with('}'));
        match hit {
            Some(name) => {
                out.push(Piece::Text(&template[literal_start..offset + i]));
                out.push(Piece::Var(
                    &template[offset + i + 1..offset + i + 1 + name.len()],
                ));
                let consumed = i + name.len() + 2;
                offset += consumed;
                literal_start = offset;
                rest = &rest[consumed..];
            }
            None => {
                offset += i + 1;
                rest = &rest[i + 1..];
            }
        }
    }
    out.push(Piece::Text(&template[literal_start..]));
    out
}

/// Single pass: substituted values are never scanned for placeholders.
fn fill(template: &str, names: &[&str], value: impl Fn(&str) -> String) -> String {
    pieces(template, names)
        .into_iter()
        .map(|p| match p {
            Piece::Text(t) => t.to_string(),
            Piece::Var(v) => value(v),
        })
        .collect()
}

/// Inverse of [`fill`]: recovers placeholder values from a filled template.
fn unfill(template: &str, names: &[&str], filled: &str) -> Option<HashMap<String, String>> {
    let parts = pieces(template, names);
    let mut out = HashMap::new();
    let mut rest = filled;
    let mut pending: Option<&str> = None;
    let last = parts.len() - 1;
    for (i, p) in parts.iter().enumerate() {
        match p {
            Piece::Var(v) => pending = Some(v),
            Piece::Text(t) => match pending.take() {
                None => rest = rest.strip_prefix(t)?,
                Some(var) => {
                    let at = if i == last {
                        rest.strip_suffix(t).map(|s| s.len())?
                    } else {
                        rest.find(t)?
                    };
                    out.insert(var.to_string(), rest[..at].to_string());
                    rest = &rest[at + t.len()..];
                }
            },
        }
    }
    Some(out)
}

pub fn build_composite_prompt(bundle: &PromptBundle) -> String {
    fill(COMPOSITE_TEMPLATE, &COMPOSITE_VARS, |v| {
        bundle.get(v).to_string()
    })
}

pub fn build_reformulation_prompt(chat_history: &str, raw_query: &str) -> String {
    let history = if chat_history.trim().is_empty() {
        NO_PRIOR_CONTEXT
    } else {
        chat_history
    };
    fill(REFORMULATION_TEMPLATE, &REFORMULATION_VARS, |v| match v {
        "chat_history" => history.to_string(),
        _ => raw_query.to_string(),
    })
}

pub fn is_reformulation_prompt(prompt: &str) -> bool {
    let head = REFORMULATION_TEMPLATE.split('{').next().unwrap_or_default();
    prompt.starts_with(head)
}

pub fn extract_reformulation_query(prompt: &str) -> String {
    unfill(REFORMULATION_TEMPLATE, &REFORMULATION_VARS, prompt)
        .and_then(|mut m| m.remove("raw_query"))
        .unwrap_or_default()
}

/// Recovers the five bundle fields from a composite prompt.
pub fn parse_prompt_fields(prompt: &str) -> Option<PromptBundle> {
    let mut m = unfill(COMPOSITE_TEMPLATE, &COMPOSITE_VARS, prompt)?;
    Some(PromptBundle {
        question_content: m.remove("question_content")?,
        correct_code: m.remove("correct_code")?,
        submitted_code: m.remove("submitted_code")?,
        chat_history: m.remove("chat_history")?,
        context: m.remove("context")?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub retries: u32,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            timeout_ms: 60_000,
            max_tokens: 1024,
            temperature: 0.0,
        }
    }
}

impl RetryPolicy {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("GenAI unavailable after {attempts} attempts: {last}")]
pub struct GenAiUnavailable {
    pub attempts: u32,
    pub last: LlmError,
}

/// Sends the composite prompt, retrying transport failures.
pub fn generate_feedback(
    llm: &dyn LlmClient,
    bundle: &PromptBundle,
    policy: &RetryPolicy,
) -> Result<LlmResponse, GenAiUnavailable> {
    let req = CompletionRequest {
        prompt: build_composite_prompt(bundle),
        max_tokens: policy.max_tokens,
        temperature: policy.temperature,
    };
    let mut attempts = 0;
    loop {
        attempts += 1;
        let started = Instant::now();
        match llm.complete(&req) {
            Ok(c) => {
                return Ok(LlmResponse {
                    text: c.text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    truncated: c.truncated,
                })
            }
            Err(e) if attempts > policy.retries => {
                return Err(GenAiUnavailable { attempts, last: e })
            }
            Err(e) => tracing::warn!(attempt = attempts, error = %e, "model call failed, retrying"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    #[serde(rename = "genai")]
    GenAi,
    AdaptiveFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub feedback_text: String,
    pub recommended_exercise_id: Option<String>,
    pub recommended_reason: Option<String>,
    pub repeated: bool,
    pub source: FeedbackSource,
}

/// The response named no known exercise. The feedback is still usable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("model response contains no valid Question ID")]
pub struct ParseNoRecommendation {
    pub feedback_text: String,
}

fn strip_markup(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '#' | '>' | '-'))
}

fn field_value<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    strip_markup(line).strip_prefix(label).map(|rest| {
        rest.trim()
            .trim_matches(|c: char| c == '*' || c == '_' || c == '`')
            .trim()
    })
}

pub fn parse_feedback(
    response: &LlmResponse,
    kg: &KnowledgeGraph,
) -> Result<FeedbackPayload, ParseNoRecommendation> {
    let lines: Vec<&str> = response.text.lines().collect();
    let heading = lines
        .iter()
        .position(|l| strip_markup(l).starts_with("Recommended Exercise:"));
    let feedback_text = match heading {
        Some(i) => lines[..i].join("\n").trim().to_string(),
        None => response.text.trim().to_string(),
    };

    let candidate = lines
        .iter()
        .rev()
        .find_map(|l| field_value(l, "Question ID:"));
    let id = match candidate {
        Some(id) if kg.exercise(id).is_some() => id.to_string(),
        _ => return Err(ParseNoRecommendation { feedback_text }),
    };

    let recommended_reason = lines
        .iter()
        .rposition(|l| strip_markup(l).starts_with("Recommended Reason:"))
        .map(|i| {
            let first = field_value(lines[i], "Recommended Reason:").unwrap_or("");
            std::iter::once(first)
                .chain(lines[i + 1..].iter().copied())
                .collect::<Vec<_>>()
                .join("\n")
                .trim()
                .to_string()
        })
        .filter(|r| !r.is_empty());

    Ok(FeedbackPayload {
        feedback_text,
        recommended_exercise_id: Some(id),
        recommended_reason,
        repeated: false,
        source: FeedbackSource::GenAi,
    })
}

/// A recommendation repeats only if the learner already solved it correctly.
pub fn is_repeated(candidate: &str, solved_correct: &HashSet<String>) -> bool {
    solved_correct.contains(candidate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Learner,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub ts: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatMemory {
    pub learner: String,
    turns: Vec<Turn>,
}

impl ChatMemory {
    pub fn new(learner: impl Into<String>) -> Self {
        Self {
            learner: learner.into(),
            turns: Vec::new(),
        }
    }

    pub fn with_turns(learner: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            learner: learner.into(),
            turns,
        }
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }
}

/// The last `n` turns, oldest first, one speaker label per turn.
pub fn render_history(memory: &ChatMemory, n: usize) -> String {
    let start = memory.turns.len().saturating_sub(n);
    memory.turns[start..]
        .iter()
        .map(|t| match t.role {
            Role::Learner => format!("Learner: {}", t.text),
            Role::Assistant => format!("Assistant: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub trait MemoryStore: Send + Sync {
    fn load(&self, learner: &str) -> io::Result<ChatMemory>;
    fn append(&self, learner: &str, turn: &Turn) -> io::Result<()>;
}

#[derive(Default)]
pub struct InMemoryStore {
    turns: Mutex<HashMap<String, Vec<Turn>>>,
}

impl MemoryStore for InMemoryStore {
    fn load(&self, learner: &str) -> io::Result<ChatMemory> {
        let turns = self.turns.lock().get(learner).cloned().unwrap_or_default();
        Ok(ChatMemory::with_turns(learner, turns))
    }

    fn append(&self, learner: &str, turn: &Turn) -> io::Result<()> {
        self.turns
            .lock()
            .entry(learner.to_string())
            .or_default()
            .push(turn.clone());
        Ok(())
    }
}

/// One append-only JSONL file per learner.
pub struct FileMemoryStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl FileMemoryStore {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, learner: &str) -> PathBuf {
        let safe: String = learner
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.dir.join(format!("{safe}.jsonl"))
    }
}

impl MemoryStore for FileMemoryStore {
    fn load(&self, learner: &str) -> io::Result<ChatMemory> {
        let path = self.path_for(learner);
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ChatMemory::new(learner)),
            Err(e) => return Err(e),
        };
        let mut turns = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Turn>(&line) {
                Ok(t) => turns.push(t),
                // a torn final write is skipped
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping bad memory line")
                }
            }
        }
        Ok(ChatMemory::with_turns(learner, turns))
    }

    fn append(&self, learner: &str, turn: &Turn) -> io::Result<()> {
        let _guard = self.write_lock.lock();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path_for(learner))?;
        let mut line = serde_json::to_string(turn).map_err(io::Error::other)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::small_graph;
    use crate::llm::{Completion, ScriptedLlm};

    fn response(text: &str) -> LlmResponse {
        LlmResponse {
            text: text.into(),
            latency_ms: 0,
            truncated: false,
        }
    }

    #[test]
    fn empty_bundle_fills_with_nothing() {
        let p = build_composite_prompt(&PromptBundle::default());
        assert!(p.contains("Recommended Exercise:"));
        assert!(p.contains("- question_content: \n"));
        assert!(p.ends_with("Context: \n"));
        for v in COMPOSITE_VARS {
            assert!(!p.contains(&format!("{{{v}}}")));
        }
    }

    #[test]
    fn substitution_is_single_pass() {
        let bundle = PromptBundle {
            question_content: "{context}".into(),
            context: "CTX".into(),
            ..Default::default()
        };
        let p = build_composite_prompt(&bundle);
        assert!(p.contains("- question_content: {context}\n"));
        assert!(p.ends_with("Context: CTX\n"));
    }

    #[test]
    fn composite_fields_round_trip() {
        let bundle = PromptBundle {
            question_content: "Add two numbers".into(),
            correct_code: "a = 1\nprint(a)".into(),
            submitted_code: "print(2)\n- Correct Code: odd".into(),
            chat_history: "Learner: hi\nAssistant: hello".into(),
            context: "Question ID: x\nContent: y".into(),
        };
        let back = parse_prompt_fields(&build_composite_prompt(&bundle)).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn reformulation_prompt_shape() {
        let p = build_reformulation_prompt("", "what next?");
        assert!(p.contains("(no prior context)"));
        assert!(is_reformulation_prompt(&p));
        assert_eq!(extract_reformulation_query(&p), "what next?");
        let p = build_reformulation_prompt("Learner: a", "q");
        assert!(p.starts_with("Given the conversation so far:\nLearner: a\n\n"));
        assert!(p.ends_with("Query: q"));
        assert!(!p.contains("Recommended Exercise:"));
        assert!(!p.contains("Do not recommend"));
        assert!(!is_reformulation_prompt(&build_composite_prompt(
            &PromptBundle::default()
        )));
    }

    #[test]
    fn parse_happy_path() {
        let kg = small_graph();
        let text = "Your loop is off by one.\n\nRecommended Exercise:\n\nQuestion ID: loops-1\nContent: Print\n\nRecommended Reason: practice\nmore loops";
        let p = parse_feedback(&response(text), &kg).unwrap();
        assert_eq!(p.recommended_exercise_id.as_deref(), Some("loops-1"));
        assert_eq!(p.feedback_text, "Your loop is off by one.");
        assert_eq!(
            p.recommended_reason.as_deref(),
            Some("practice\nmore loops")
        );
        assert_eq!(p.source, FeedbackSource::GenAi);
        assert!(!p.repeated);
    }

    #[test]
    fn parse_unknown_id_keeps_feedback() {
        let kg = small_graph();
        let text = "Nice.\nRecommended Exercise:\nQuestion ID: E-unknown";
        let err = parse_feedback(&response(text), &kg).unwrap_err();
        assert_eq!(err.feedback_text, "Nice.");
        let err = parse_feedback(&response("just prose"), &kg).unwrap_err();
        assert_eq!(err.feedback_text, "just prose");
    }

    #[test]
    fn parse_last_question_id_wins() {
        let kg = small_graph();
        let text = "Good.\n\nRecommended Exercise:\n\nQuestion ID:\nContent:\n\nRecommended Exercise:\n**Question ID:** variables-2\nContent: x\n\n**Question ID:** conditionals-0\n";
        let p = parse_feedback(&response(text), &kg).unwrap();
        assert_eq!(p.recommended_exercise_id.as_deref(), Some("conditionals-0"));
        assert!(p.recommended_reason.is_none());
    }

    #[test]
    fn repeats_use_solved_set() {
        let solved: HashSet<String> = ["a".to_string()].into();
        assert!(is_repeated("a", &solved));
        assert!(!is_repeated("b", &solved));
        assert!(!is_repeated("a", &HashSet::new()));
    }

    #[test]
    fn retry_policy() {
        let policy = RetryPolicy::default();
        let llm = ScriptedLlm::new([Ok("fixed".to_string())]);
        let r = generate_feedback(&llm, &PromptBundle::default(), &policy).unwrap();
        assert_eq!(r.text, "fixed");
        assert!(!r.truncated);

        let llm = ScriptedLlm::new([
            Err(LlmError::Timeout),
            Err(LlmError::Transport("x".into())),
            Ok("third".to_string()),
        ]);
        let r = generate_feedback(&llm, &PromptBundle::default(), &policy).unwrap();
        assert_eq!(r.text, "third");

        struct Down;
        impl LlmClient for Down {
            fn complete(&self, _: &CompletionRequest) -> Result<Completion, LlmError> {
                Err(LlmError::Status(503))
            }
        }
        let err = generate_feedback(&Down, &PromptBundle::default(), &policy).unwrap_err();
        assert_eq!(err.attempts, 3);
    }

    fn turn(role: Role, text: &str, ts: i64) -> Turn {
        Turn {
            role,
            text: text.into(),
            ts,
        }
    }

    #[test]
    fn history_window() {
        let mut m = ChatMemory::new("l");
        assert_eq!(render_history(&m, 6), "");
        for i in 1..=8 {
            let role = if i % 2 == 1 {
                Role::Learner
            } else {
                Role::Assistant
            };
            m.push(turn(role, &format!("t{i}"), i));
        }
        let h = render_history(&m, 6);
        let lines: Vec<&str> = h.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "Learner: t3");
        assert_eq!(lines[5], "Assistant: t8");
        assert_eq!(h, render_history(&m, 6));
        assert_eq!(render_history(&m, 0), "");
    }

    #[test]
    fn file_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileMemoryStore::new(dir.path()).unwrap();
        store
            .append("u/1", &turn(Role::Learner, "code\nline", 1))
            .unwrap();
        store
            .append("u/1", &turn(Role::Assistant, "ok", 2))
            .unwrap();
        let m = store.load("u/1").unwrap();
        assert_eq!(m.turns().len(), 2);
        assert_eq!(m.turns()[0].text, "code\nline");
        let raw = fs::read_to_string(store.path_for("u/1")).unwrap();
        assert_eq!(raw.lines().count(), 2);
        assert!(raw.starts_with(r#"{"role":"learner","text":"code\nline","ts":1}"#));
    }
}
