//! Learning-log records: the append-only event stream that drives both
//! session replay and analytics.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::Classification;
use crate::genai::FeedbackSource;
use crate::graph::Level;

/// Instructional mode, fixed per learner account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adaptive,
    #[serde(rename = "genai")]
    GenAi,
    Hybrid,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Adaptive, Mode::GenAi, Mode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::GenAi => "genai",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adaptive" => Ok(Mode::Adaptive),
            "genai" => Ok(Mode::GenAi),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(format!(
                "unknown mode '{other}' (expected adaptive, genai or hybrid)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NeedsPretest,
    InExercise,
    AwaitingAgreement,
    AwaitingRecommendationDecision,
    AwaitingRepeatDecision,
    ConceptComplete,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NeedsPretest => "needs_pretest",
            Phase::InExercise => "in_exercise",
            Phase::AwaitingAgreement => "awaiting_agreement",
            Phase::AwaitingRecommendationDecision => "awaiting_recommendation_decision",
            Phase::AwaitingRepeatDecision => "awaiting_repeat_decision",
            Phase::ConceptComplete => "concept_complete",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Options a learner can pick when a recommendation is on screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    #[serde(rename = "accept_genai")]
    AcceptGenAi,
    UseAdaptive,
    #[serde(rename = "repeat_genai")]
    RepeatGenAi,
    DeclineAdaptive,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::AcceptGenAi => "accept_genai",
            Choice::UseAdaptive => "use_adaptive",
            Choice::RepeatGenAi => "repeat_genai",
            Choice::DeclineAdaptive => "decline_adaptive",
        }
    }

    /// Choices that follow the model's recommendation.
    pub fn is_genai(self) -> bool {
        matches!(self, Choice::AcceptGenAi | Choice::RepeatGenAi)
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown choice '{s}'"))
    }
}

/// Which recommender produced an exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[serde(rename = "genai")]
    GenAi,
    Adaptive,
}

/// What caused an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignVia {
    Pretest,
    Decision,
    Skip,
}

/// Ratings after a scored first attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingChange {
    pub theta: f64,
    pub skill_attempts: u32,
    pub d: f64,
    pub item_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Event {
    Login {
        mode: Mode,
    },
    ConceptStart {
        mode: Mode,
        language: String,
        concept: String,
        resumed: bool,
        pretest_items: Vec<String>,
    },
    PretestSubmit {
        items: Vec<String>,
        passed: Vec<bool>,
        classifications: Vec<Classification>,
        theta: f64,
        level: Level,
    },
    ExerciseAssigned {
        exercise: String,
        source: Source,
        via: AssignVia,
    },
    Run {
        exercise: String,
        timed_out: bool,
    },
    Submission {
        exercise: String,
        classification: Classification,
        all_passed: bool,
        first_attempt: bool,
        rating: Option<RatingChange>,
    },
    FeedbackShown {
        exercise: String,
        source: FeedbackSource,
        text: String,
        /// The model could not be reached.
        unavailable: bool,
        /// The response named no usable exercise.
        parse_failed: bool,
        /// Query reformulation fell back to the raw query.
        reformulation_degraded: bool,
    },
    Agreement {
        /// 1..=5, or 0 when the learner skipped the question.
        rating: u8,
        next_phase: Phase,
    },
    RecommendationShown {
        from_exercise: String,
        genai_candidate: Option<String>,
        reason: Option<String>,
        adaptive_candidate: Option<String>,
        repeated: bool,
        offered: Vec<Choice>,
        phase: Phase,
    },
    RecommendationDecision {
        phase: Phase,
        offered: Vec<Choice>,
        chosen: Choice,
        repeated: bool,
        /// None when the choice leads to the repeat reminder instead of an assignment.
        exercise: Option<String>,
        source: Option<Source>,
    },
    Skip {
        exercise: String,
    },
    ConceptMastered {
        theta: f64,
        next_concept: Option<String>,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Login { .. } => "login",
            Event::ConceptStart { .. } => "concept_start",
            Event::PretestSubmit { .. } => "pretest_submit",
            Event::ExerciseAssigned { .. } => "exercise_assigned",
            Event::Run { .. } => "run",
            Event::Submission { .. } => "submission",
            Event::FeedbackShown { .. } => "feedback_shown",
            Event::Agreement { .. } => "agreement",
            Event::RecommendationShown { .. } => "recommendation_shown",
            Event::RecommendationDecision { .. } => "recommendation_decision",
            Event::Skip { .. } => "skip",
            Event::ConceptMastered { .. } => "concept_mastered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// UTC milliseconds.
    pub ts: i64,
    pub learner: String,
    /// Empty for learner-level events such as login.
    pub session: String,
    #[serde(flatten)]
    pub event: Event,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }
}

pub fn session_id(learner: &str, language_id: &str, concept_id: &str) -> String {
    format!("{learner}:{language_id}:{concept_id}")
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// Deterministic clock advancing a fixed step per reading.
pub struct StepClock {
    next: AtomicI64,
    step: i64,
}

impl StepClock {
    pub fn new(start_ms: i64, step_ms: i64) -> Self {
        Self {
            next: AtomicI64::new(start_ms),
            step: step_ms,
        }
    }
}

impl Clock for StepClock {
    fn now_ms(&self) -> i64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

/// Where committed events go. A batch is written completely or not at all
/// from the engine's point of view.
pub trait EventSink: Send + Sync {
    fn append(&self, records: &[EventRecord]) -> io::Result<()>;
}

#[derive(Default)]
pub struct MemorySink {
    records: Mutex<Vec<EventRecord>>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<EventRecord> {
        self.records.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EventSink for MemorySink {
    fn append(&self, records: &[EventRecord]) -> io::Result<()> {
        self.records.lock().extend_from_slice(records);
        Ok(())
    }
}

/// Append-only JSONL file, one record per line.
pub struct JsonlLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlLog {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for JsonlLog {
    fn append(&self, records: &[EventRecord]) -> io::Result<()> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        let mut f = self.file.lock();
        f.write_all(buf.as_bytes())?;
        f.flush()
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read event log: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
}

/// Parsed log plus whether a torn final line was discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub records: Vec<EventRecord>,
    /// Byte length of the complete lines.
    pub valid_len: u64,
    pub dropped_partial_line: bool,
}

/// Parses JSONL text. A final line without a terminating newline is a torn
/// write and is dropped; any other bad line is corruption.
pub fn parse_log(text: &str) -> Result<LoadedLog, LogError> {
    let (complete, tail) = match text.rfind('\n') {
        Some(i) => (&text[..=i], &text[i + 1..]),
        None => ("", text),
    };
    let mut records = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| LogError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(LoadedLog {
        records,
        valid_len: complete.len() as u64,
        dropped_partial_line: !tail.trim().is_empty(),
    })
}

pub fn read_log(path: impl AsRef<Path>) -> Result<LoadedLog, LogError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let loaded = parse_log(&text)?;
    if loaded.dropped_partial_line {
        tracing::warn!(path = %path.display(), "dropping partial final line of event log");
    }
    Ok(loaded)
}

/// Reads the log and cuts any torn final line off the file so later
/// appends start on a fresh line.
pub fn recover_log(path: impl AsRef<Path>) -> Result<LoadedLog, LogError> {
    let path = path.as_ref();
    let loaded = read_log(path)?;
    if loaded.dropped_partial_line {
        OpenOptions::new()
            .write(true)
            .open(path)?
            .set_len(loaded.valid_len)?;
    }
    Ok(loaded)
}

pub fn write_log(path: impl AsRef<Path>, records: &[EventRecord]) -> io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_line());
        buf.push('\n');
    }
    fs::write(path, buf)
}
