//! Exercise embedding, vector index and history-aware retrieval.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genai::build_reformulation_prompt;
use crate::graph::{Exercise, KnowledgeGraph, Level};
use crate::llm::{CompletionRequest, LlmClient};

/// Dimension of the built-in hash embedder.
pub const HASH_DIM: usize = 64;

const FNV_OFFSET: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedder request failed: {0}")]
    Transport(String),
    #[error("embedder returned {got} vectors for {want} texts")]
    Count { want: usize, got: usize },
}

/// Either all zeros (no tokens) or unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Scales to unit length; zero vectors stay zero.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
        self
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercased runs of alphanumerics and underscores.
pub fn embed_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Hashed bag-of-tokens embedding.
pub fn hash_embed(text: &str) -> EmbeddingVector {
    let mut v = EmbeddingVector::zeros(HASH_DIM);
    for token in embed_tokens(text) {
        let slot = (fnv1a64(token.as_bytes()) % HASH_DIM as u64) as usize;
        v.0[slot] += 1.0;
    }
    v.normalized()
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch(u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or(EmbedError::Count { want: 1, got: 0 })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        HASH_DIM
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| hash_embed(t)).collect())
    }
}

/// External embedding service: `POST {"texts": [...]}` returning
/// `{"vectors": [[...]]}`.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            dim,
            agent,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let resp: EmbedResponse = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| EmbedError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::Count {
                want: texts.len(),
                got: resp.vectors.len(),
            });
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    Err(EmbedError::DimensionMismatch(self.dim, v.len()))
                } else {
                    Ok(EmbeddingVector(v).normalized())
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub concept_id: String,
    pub language_id: String,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentNode {
    pub exercise_id: String,
    pub text: String,
    pub meta: NodeMeta,
}

/// Text indexed for an exercise: statement, concept, hint labels, level.
pub fn document_for(kg: &KnowledgeGraph, exercise: &Exercise) -> DocumentNode {
    let concept_name = kg
        .concept(&exercise.concept_id)
        .map(|c| c.name.as_str())
        .unwrap_or(exercise.concept_id.as_str());
    let hints: Vec<&str> = exercise
        .hints
        .iter()
        .flat_map(|h| {
            std::iter::once(h.concept.as_str()).chain(h.points.iter().map(String::as_str))
        })
        .collect();
    DocumentNode {
        exercise_id: exercise.id.clone(),
        text: format!(
            "{}\n{}\n{}\n{}",
            exercise.statements.en,
            concept_name,
            hints.join(", "),
            exercise.level
        ),
        meta: NodeMeta {
            concept_id: exercise.concept_id.clone(),
            language_id: exercise.language_id.clone(),
            level: exercise.level,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub exercise_id: String,
    pub vector: EmbeddingVector,
    pub meta: NodeMeta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorIndex {
    entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub fn from_entries(entries: Vec<IndexEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stable byte encoding (ids, metadata and little-endian components).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for s in [&e.exercise_id, &e.meta.concept_id, &e.meta.language_id] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.push(e.meta.level as u8);
            out.extend_from_slice(&(e.vector.dim() as u32).to_le_bytes());
            for x in &e.vector.0 {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

/// One entry per exercise, in graph order.
pub fn index_graph(
    kg: &KnowledgeGraph,
    embedder: &dyn Embedder,
) -> Result<VectorIndex, EmbedError> {
    let docs: Vec<DocumentNode> = kg.exercises().iter().map(|e| document_for(kg, e)).collect();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    Ok(VectorIndex {
        entries: docs
            .into_iter()
            .zip(vectors)
            .map(|(d, vector)| IndexEntry {
                exercise_id: d.exercise_id,
                vector,
                meta: d.meta,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub exercise_id: String,
    pub score: f64,
    pub meta: NodeMeta,
}

/// Exhaustive scan; hits ordered by score descending, then id ascending.
pub fn top_k(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
    filter: &dyn Fn(&NodeMeta) -> bool,
    exclude: &HashSet<String>,
) -> Vec<RetrievalHit> {
    let mut hits: Vec<RetrievalHit> = index
        .entries
        .iter()
        .filter(|e| filter(&e.meta) && !exclude.contains(&e.exercise_id))
        .map(|e| RetrievalHit {
            exercise_id: e.exercise_id.clone(),
            score: cosine(query, &e.vector).unwrap_or(0.0),
            meta: e.meta.clone(),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.exercise_id.cmp(&b.exercise_id))
    });
    hits.truncate(k);
    hits
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reformulated {
    pub text: String,
    /// The model call failed and the raw query was used instead.
    pub degraded: bool,
    pub llm_called: bool,
}

/// Rewrites the learner query into a standalone question. Without history
/// the raw query is returned and the model is not called.
pub fn reformulate_query(chat_history: &str, raw_query: &str, llm: &dyn LlmClient) -> Reformulated {
    if chat_history.trim().is_empty() {
        return Reformulated {
            text: raw_query.to_string(),
            degraded: false,
            llm_called: false,
        };
    }
    let req = CompletionRequest::new(build_reformulation_prompt(chat_history, raw_query));
    match llm.complete(&req) {
        Ok(c) if !c.text.trim().is_empty() => Reformulated {
            text: c.text,
            degraded: false,
            llm_called: true,
        },
        Ok(_) => Reformulated {
            text: raw_query.to_string(),
            degraded: true,
            llm_called: true,
        },
        Err(e) => {
            tracing::warn!(error = %e, "query reformulation failed, using raw query");
            Reformulated {
                text: raw_query.to_string(),
                degraded: true,
                llm_called: true,
            }
        }
    }
}

/// What the retriever needs to know about the learner.
#[derive(Debug, Clone, Copy)]
pub struct LearnerScope<'a> {
    pub language_id: &'a str,
    pub concept_id: &'a str,
    pub solved: &'a HashSet<String>,
    pub mastered: &'a HashSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedContext {
    pub block: String,
    pub hits: Vec<RetrievalHit>,
    /// Every in-scope exercise was solved, so the solved set was not excluded.
    pub exclusion_lifted: bool,
}

/// Renders hits as the context block handed to the composite prompt.
pub fn render_context(kg: &KnowledgeGraph, hits: &[RetrievalHit]) -> String {
    hits.iter()
        .filter_map(|h| kg.exercise(&h.exercise_id))
        .map(|e| {
            let points: Vec<&str> = e.hint_points().collect();
            format!(
                "Question ID: {}\nContent: {}\nLevel: {}; Hints: {}",
                e.id,
                e.statements.en,
                e.level,
                points.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Retrieves candidate next exercises from the learner's concept and the
/// concept that follows it.
pub fn retrieve_context(
    kg: &KnowledgeGraph,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    scope: LearnerScope<'_>,
    question_text: &str,
    k: usize,
) -> Result<RetrievedContext, EmbedError> {
    let next = kg
        .next_concept(scope.language_id, scope.concept_id, scope.mastered)
        .ok()
        .flatten()
        .map(|c| c.id.clone());
    let in_scope = |m: &NodeMeta| {
        m.language_id == scope.language_id
            && (m.concept_id == scope.concept_id || next.as_deref() == Some(m.concept_id.as_str()))
    };
    let any_unsolved = index
        .entries()
        .iter()
        .any(|e| in_scope(&e.meta) && !scope.solved.contains(&e.exercise_id));
    let empty = HashSet::new();
    let exclude = if any_unsolved { scope.solved } else { &empty };

    let query = embedder.embed(question_text)?;
    let hits = top_k(index, &query, k.max(1), &in_scope, exclude);
    Ok(RetrievedContext {
        block: render_context(kg, &hits),
        hits,
        exclusion_lifted: !any_unsolved,
    })
}
