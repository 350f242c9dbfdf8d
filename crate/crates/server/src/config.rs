//! Service configuration, loaded from TOML.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use adventure_core::assessment::{CodeRunner, RunnerConfig};
use adventure_core::elo::EloParams;
use adventure_core::genai::RetryPolicy;
use adventure_core::llm::{HttpLlm, LlmClient, LlmError, ReferenceLlm, ScriptedLlm};
use adventure_core::rag::{Embedder, HashEmbedder, HttpEmbedder};
use adventure_core::session::{EngineConfig, SharedGraph};

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "ADVENTURE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash,
    Http {
        url: String,
        dim: usize,
        #[serde(default = "default_http_timeout_ms")]
        timeout_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmConfig {
    /// Built-in deterministic model that grades with the test runner.
    MockReference,
    /// Replays canned responses in order, then the fallback (if any).
    MockScripted {
        #[serde(default)]
        responses: Vec<String>,
        #[serde(default)]
        fallback: Option<String>,
    },
    Http {
        url: String,
        #[serde(default = "default_http_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_http_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Knowledge-graph file. Falls back to `<data_dir>/graph.json`, then to
    /// the bundled sample curriculum.
    pub graph: Option<PathBuf>,
    pub elo: EloParams,
    pub runners: RunnerConfig,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub retry: RetryPolicy,
    pub memory_window: usize,
    pub retrieval_k: usize,
    pub snapshot_interval_secs: u64,
    pub max_in_flight_per_learner: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            graph: None,
            elo: engine.elo,
            runners: RunnerConfig::default(),
            embedder: EmbedderConfig::Hash,
            llm: LlmConfig::MockReference,
            retry: engine.retry,
            memory_window: engine.memory_window,
            retrieval_k: engine.retrieval_k,
            snapshot_interval_secs: 30,
            max_in_flight_per_learner: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config field `{field}`: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

impl ServiceConfig {
    /// Reads the given file, else the file named by `ADVENTURE_CONFIG`,
    /// else uses defaults. The result is validated.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bind.parse::<SocketAddr>().map_err(|e| {
            invalid(
                "bind",
                format!("{:?} is not a socket address: {e}", self.bind),
            )
        })?;
        if self.data_dir.as_os_str().is_empty() {
            return Err(invalid("data_dir", "must not be empty"));
        }
        self.elo
            .validate()
            .map_err(|e| invalid("elo", e.to_string()))?;
        for (lang, spec) in &self.runners.runners {
            if spec.cmd.split_whitespace().next().is_none() {
                return Err(invalid("runners", format!("{lang}: cmd must not be empty")));
            }
            if spec.timeout_ms == 0 {
                return Err(invalid(
                    "runners",
                    format!("{lang}: timeout_ms must be positive"),
                ));
            }
        }
        match &self.embedder {
            EmbedderConfig::Http { url, dim, .. } => {
                if url.is_empty() {
                    return Err(invalid("embedder.url", "must not be empty"));
                }
                if *dim == 0 {
                    return Err(invalid("embedder.dim", "must be positive"));
                }
            }
            EmbedderConfig::Hash => {}
        }
        if let LlmConfig::Http { url, .. } = &self.llm {
            if url.is_empty() {
                return Err(invalid("llm.url", "must not be empty"));
            }
        }
        if self.retry.timeout_ms == 0 {
            return Err(invalid("retry.timeout_ms", "must be positive"));
        }
        if self.retrieval_k == 0 {
            return Err(invalid("retrieval_k", "must be at least 1"));
        }
        if self.snapshot_interval_secs == 0 {
            return Err(invalid("snapshot_interval_secs", "must be positive"));
        }
        if self.max_in_flight_per_learner == 0 {
            return Err(invalid("max_in_flight_per_learner", "must be at least 1"));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            elo: self.elo,
            retry: self.retry,
            memory_window: self.memory_window,
            retrieval_k: self.retrieval_k,
        }
    }

    pub fn graph_path(&self) -> Option<PathBuf> {
        self.graph.clone().or_else(|| {
            let p = self.paths().graph;
            p.exists().then_some(p)
        })
    }

    pub fn paths(&self) -> DataPaths {
        DataPaths::new(&self.data_dir)
    }

    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        match &self.embedder {
            EmbedderConfig::Hash => Arc::new(HashEmbedder),
            EmbedderConfig::Http {
                url,
                dim,
                timeout_ms,
            } => Arc::new(HttpEmbedder::new(
                url.clone(),
                *dim,
                Duration::from_millis(*timeout_ms),
            )),
        }
    }

    pub fn build_llm(&self, kg: SharedGraph, runner: Arc<dyn CodeRunner>) -> Arc<dyn LlmClient> {
        match &self.llm {
            LlmConfig::MockReference => Arc::new(ReferenceLlm::new(kg, runner)),
            LlmConfig::MockScripted {
                responses,
                fallback,
            } => {
                let llm = ScriptedLlm::new(responses.iter().cloned().map(Ok::<_, LlmError>));
                Arc::new(match fallback {
                    Some(f) => llm.with_fallback(f.clone()),
                    None => llm,
                })
            }
            LlmConfig::Http { url, timeout_ms } => Arc::new(HttpLlm::from_env(
                url.clone(),
                Duration::from_millis(*timeout_ms),
            )),
        }
    }
}

/// Files kept in the data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub dir: PathBuf,
    pub accounts: PathBuf,
    pub events: PathBuf,
    pub snapshot: PathBuf,
    pub memory: PathBuf,
    pub graph: PathBuf,
}

impl DataPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            accounts: dir.join("accounts.json"),
            events: dir.join("events.jsonl"),
            snapshot: dir.join("snapshot.json"),
            memory: dir.join("memory"),
            graph: dir.join("graph.json"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ServiceConfig::default().validate().unwrap();
    }

    #[test]
    fn example_config_matches_defaults() {
        let cfg =
            ServiceConfig::from_toml(include_str!("../../../adventure.example.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, ServiceConfig::default());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ServiceConfig::from_toml(
            r#"
            bind = "0.0.0.0:9000"
            data_dir = "/tmp/adv"
            retrieval_k = 3
            [elo]
            a = 0.6
            [llm]
            kind = "mock_scripted"
            responses = ["hello"]
            [embedder]
            kind = "http"
            url = "http://localhost:1/embed"
            dim = 32
            [runners.python]
            cmd = "python3 {file}"
            file_name = "main.py"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.elo.a, 0.6);
        assert_eq!(cfg.elo.b, 0.05);
        assert_eq!(cfg.retrieval_k, 3);
        assert_eq!(cfg.memory_window, 6);
        let back = ServiceConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn field_level_errors() {
        let err = ServiceConfig::from_toml("bogus = 1").unwrap_err();
        assert!(err.contains("bogus"), "{err}");
        let cfg = ServiceConfig {
            bind: "nowhere".into(),
            ..ServiceConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("`bind`"));
        let mut cfg = ServiceConfig::default();
        cfg.elo.band_hi = 3.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("`elo`"));
        let cfg = ServiceConfig {
            retrieval_k: 0,
            ..ServiceConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("retrieval_k"));
    }
}
