//! Narrow language-model client contract and its implementations.
//!
//! Everything the engine needs from a model is one call: prompt text in,
//! completion text out. Two deterministic mocks make the GenAI paths
//! testable offline.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{assess, CodeRunner};
use crate::genai::{extract_reformulation_query, is_reformulation_prompt, parse_prompt_fields};
use crate::graph::KnowledgeGraph;

/// Environment variable holding the bearer token for the HTTP client.
pub const TOKEN_ENV: &str = "ADVENTURE_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(prompt: String) -> Self {
        Self {
            prompt,
            max_tokens: 1024,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub truncated: bool,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("model call timed out")]
    Timeout,
    #[error("model transport error: {0}")]
    Transport(String),
    #[error("model returned HTTP {0}")]
    Status(u16),
    #[error("model response malformed: {0}")]
    Malformed(String),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError>;
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        (**self).complete(req)
    }
}

/// Counts every call that reaches the wrapped client.
pub struct CountingLlm<L> {
    inner: L,
    calls: AtomicUsize,
}

impl<L: LlmClient> CountingLlm<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &L {
        &self.inner
    }
}

impl<L: LlmClient> LlmClient for CountingLlm<L> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Replays queued responses for feedback prompts. Reformulation prompts
/// are answered by echoing the query.
#[derive(Default)]
pub struct ScriptedLlm {
    script: Mutex<VecDeque<Result<String, LlmError>>>,
    fallback: Option<String>,
}

impl ScriptedLlm {
    pub fn new(script: impl IntoIterator<Item = Result<String, LlmError>>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
            fallback: None,
        }
    }

    /// Response used once the script runs out.
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn push(&self, item: Result<String, LlmError>) {
        self.script.lock().push_back(item);
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        if is_reformulation_prompt(&req.prompt) {
            return Ok(Completion::text(extract_reformulation_query(&req.prompt)));
        }
        match self.script.lock().pop_front() {
            Some(item) => item.map(Completion::text),
            None => self
                .fallback
                .clone()
                .map(Completion::text)
                .ok_or_else(|| LlmError::Transport("script exhausted".into())),
        }
    }
}

/// Deterministic stand-in model. It grades the submission itself, writes
/// canned feedback and recommends the first context exercise that the
/// learner has not just solved.
pub struct ReferenceLlm {
    kg: Arc<RwLock<Arc<KnowledgeGraph>>>,
    runner: Arc<dyn CodeRunner>,
}

impl ReferenceLlm {
    pub fn new(kg: Arc<RwLock<Arc<KnowledgeGraph>>>, runner: Arc<dyn CodeRunner>) -> Self {
        Self { kg, runner }
    }

    fn feedback(&self, prompt: &str) -> Result<String, LlmError> {
        let fields = parse_prompt_fields(prompt)
            .ok_or_else(|| LlmError::Malformed("unrecognised prompt".into()))?;
        let kg = self.kg.read().clone();
        let exercise = kg.exercises().iter().find(|e| {
            e.reference_solution == fields.correct_code
                && e.statements.en == fields.question_content
        });

        let mut out = String::new();
        let mut passed_current = None;
        match exercise {
            Some(ex) => {
                let outcome = assess(ex, &fields.submitted_code, self.runner.as_ref())
                    .map_err(|e| LlmError::Transport(e.to_string()))?;
                let total = outcome.results.len();
                let failed = outcome.results.iter().filter(|r| !r.passed).count();
                if outcome.all_passed {
                    out.push_str(&format!(
                        "Your code is correct. It passes all {total} test cases.\n"
                    ));
                    passed_current = Some(ex.id.as_str());
                } else {
                    let points: Vec<&str> = ex.hint_points().collect();
                    out.push_str(&format!(
                        "Your code is not correct yet: {failed} of {total} test cases fail.\n\
                         Compare your logic with the expected behaviour and review: {}.\n",
                        points.join(", ")
                    ));
                }
            }
            None => out.push_str("I could not match this submission to a known exercise.\n"),
        }

        let candidates: Vec<(&str, &str)> = context_entries(&fields.context);
        let pick = candidates
            .iter()
            .find(|(id, _)| Some(*id) != passed_current)
            .or_else(|| candidates.first());
        if let Some((id, content)) = pick {
            out.push_str(&format!(
                "\nRecommended Exercise:\n\nQuestion ID: {id}\nContent: {content}\n\n\
                 Recommended Reason: It practises the knowledge points related to this exercise.\n"
            ));
        }
        Ok(out)
    }
}

/// (id, content) pairs from a rendered context block.
fn context_entries(context: &str) -> Vec<(&str, &str)> {
    let mut out = Vec::new();
    let mut lines = context.lines().peekable();
    while let Some(line) = lines.next() {
        if let Some(id) = line.strip_prefix("Question ID: ") {
            let content = lines
                .peek()
                .and_then(|l| l.strip_prefix("Content: "))
                .unwrap_or("");
            out.push((id.trim(), content));
        }
    }
    out
}

impl LlmClient for ReferenceLlm {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        if is_reformulation_prompt(&req.prompt) {
            return Ok(Completion::text(extract_reformulation_query(&req.prompt)));
        }
        self.feedback(&req.prompt).map(Completion::text)
    }
}

/// Chat-completions style endpoint taking `{"prompt","max_tokens","temperature"}`.
pub struct HttpLlm {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            token,
            agent,
        }
    }

    /// Reads the bearer token from the environment.
    pub fn from_env(url: impl Into<String>, timeout: Duration) -> Self {
        Self::new(url, std::env::var(TOKEN_ENV).ok(), timeout)
    }
}

fn extract_completion(v: &serde_json::Value) -> Option<Completion> {
    if let Some(t) = v.get("text").and_then(|t| t.as_str()) {
        let truncated = v
            .get("truncated")
            .and_then(|t| t.as_bool())
            .unwrap_or(false);
        return Some(Completion {
            text: t.to_string(),
            truncated,
        });
    }
    let choice = v.get("choices")?.get(0)?;
    let text = choice
        .get("text")
        .and_then(|t| t.as_str())
        .or_else(|| choice.get("message")?.get("content")?.as_str())?;
    let truncated = choice.get("finish_reason").and_then(|f| f.as_str()) == Some("length");
    Some(Completion {
        text: text.to_string(),
        truncated,
    })
}

impl LlmClient for HttpLlm {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call.send_json(req).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(LlmError::Status(status));
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        extract_completion(&body).ok_or_else(|| LlmError::Malformed("no completion text".into()))
    }
}
