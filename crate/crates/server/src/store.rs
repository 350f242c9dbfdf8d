//! Durable state: the JSONL event log is the source of truth, the JSON
//! snapshot only shortens replay.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use adventure_core::events::{recover_log, LogError};
use adventure_core::session::{apply_event, reconstruct, EngineState, ReplayError};

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub state: EngineState,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{source}; the log may be truncated to its last valid line or restored from backup")]
    Log {
        #[source]
        source: LogError,
    },
    #[error(
        "event log replay failed: {source}; the log is inconsistent and must be repaired or restored from backup"
    )]
    Replay {
        #[source]
        source: ReplayError,
    },
    #[error(
        "snapshot {path} is unusable ({message}); delete it to rebuild state from the event log"
    )]
    Snapshot { path: PathBuf, message: String },
    #[error("cannot write snapshot {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub events: usize,
    pub from_snapshot: u64,
    pub dropped_partial_line: bool,
}

fn snapshot_error(path: &Path, message: impl Into<String>) -> StoreError {
    StoreError::Snapshot {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_snapshot(path: &Path) -> Result<Option<Snapshot>, StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(snapshot_error(path, e.to_string())),
    };
    let snap: Snapshot =
        serde_json::from_str(&text).map_err(|e| snapshot_error(path, e.to_string()))?;
    if snap.version != SNAPSHOT_VERSION {
        return Err(snapshot_error(
            path,
            format!("unsupported version {}", snap.version),
        ));
    }
    Ok(Some(snap))
}

/// Rebuilds the engine state. A torn final log line is dropped (and cut
/// from the file); any other inconsistency refuses to start.
pub fn recover_state(
    events: &Path,
    snapshot: &Path,
) -> Result<(EngineState, Recovery), StoreError> {
    let loaded = recover_log(events).map_err(|source| StoreError::Log { source })?;
    if loaded.dropped_partial_line {
        tracing::warn!(path = %events.display(), "dropped a partially written final event");
    }
    let records = loaded.records;
    let (state, from_snapshot) = match read_snapshot(snapshot)? {
        Some(snap) => {
            let start = snap.state.event_count;
            if start > records.len() as u64 {
                return Err(snapshot_error(
                    snapshot,
                    format!(
                        "it covers {start} events but the log holds {}",
                        records.len()
                    ),
                ));
            }
            let mut state = snap.state;
            for rec in &records[start as usize..] {
                apply_event(&mut state, rec).map_err(|source| StoreError::Replay { source })?;
            }
            (state, start)
        }
        None => (
            reconstruct(&records).map_err(|source| StoreError::Replay { source })?,
            0,
        ),
    };
    Ok((
        state,
        Recovery {
            events: records.len(),
            from_snapshot,
            dropped_partial_line: loaded.dropped_partial_line,
        },
    ))
}

/// Writes atomically via a sibling temporary file.
pub fn write_snapshot(path: &Path, state: &EngineState) -> Result<(), StoreError> {
    let err = |source| StoreError::Write {
        path: path.to_path_buf(),
        source,
    };
    let snap = Snapshot {
        version: SNAPSHOT_VERSION,
        state: state.clone(),
    };
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(&snap).expect("state serializes")).map_err(err)?;
    std::fs::rename(&tmp, path).map_err(err)
}
