//! Per-learner session engine for the adaptive, GenAI and hybrid modes.
//!
//! The engine is event-sourced: every operation turns into a batch of
//! [`Event`]s which are appended to the log and then applied through
//! [`apply_event`]. Replaying a log through the same reducer therefore
//! rebuilds exactly the live state.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{
    assess, failed_cases_view, run_once, Classification, CodeRunner, FailedCase, RunStatus,
    RunnerError,
};
use crate::elo::{
    level_of, mastery_reached, place_from_pretest, progress_fraction, select_next_exercise,
    update_ratings, DifficultyRating, EloError, EloParams, Placement, RatingLookup, Selection,
    SkillState,
};
use crate::events::{
    session_id, AssignVia, Choice, Clock, Event, EventRecord, EventSink, Mode, Phase, RatingChange,
    Source,
};
use crate::genai::{
    generate_feedback, parse_feedback, render_history, FeedbackPayload, FeedbackSource,
    MemoryStore, PromptBundle, RetryPolicy, Role, Turn,
};
use crate::graph::{Exercise, GraphError, KnowledgeGraph, Level};
use crate::llm::LlmClient;
use crate::rag::{
    index_graph, reformulate_query, retrieve_context, EmbedError, Embedder, LearnerScope,
    VectorIndex,
};

/// Feedback text used when the model cannot be reached.
pub const UNAVAILABLE_NOTICE: &str =
    "Sorry, feedback is unavailable right now. Here is an exercise chosen by the adaptive mode instead.";

pub type SharedGraph = Arc<RwLock<Arc<KnowledgeGraph>>>;

pub fn shared_graph(kg: KnowledgeGraph) -> SharedGraph {
    Arc::new(RwLock::new(Arc::new(kg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub elo: EloParams,
    pub retry: RetryPolicy,
    /// Chat turns rendered into the prompt.
    pub memory_window: usize,
    /// Exercises retrieved into the prompt context.
    pub retrieval_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            elo: EloParams::default(),
            retry: RetryPolicy::default(),
            memory_window: 6,
            retrieval_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenAiCandidate {
    pub exercise_id: String,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRecommendation {
    /// The exercise whose submission produced this recommendation.
    pub from_exercise: String,
    pub genai_candidate: Option<GenAiCandidate>,
    pub adaptive_candidate: Option<String>,
    pub repeated: bool,
    pub offered: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub learner: String,
    pub language_id: String,
    pub concept_id: String,
    pub phase: Phase,
    pub current_exercise: Option<String>,
    /// Set only while a decision is awaited.
    pub pending: Option<PendingRecommendation>,
    /// The recommendation held back until the learner rates the feedback.
    pub staged: Option<PendingRecommendation>,
    pub skill: SkillState,
    pub solved_correct: BTreeSet<String>,
    /// Exercises whose first attempt already moved the ratings.
    pub rated: BTreeSet<String>,
    pub pretest_items: Vec<String>,
    /// Exercises skipped since the last submission or decision.
    pub skip_streak: BTreeSet<String>,
    pub feedback_text: Option<String>,
}

impl SessionState {
    fn solved_set(&self) -> HashSet<String> {
        self.solved_correct.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub mode: Mode,
    pub active: Option<String>,
    pub sessions: BTreeMap<String, SessionState>,
    pub mastered: BTreeSet<String>,
    pub last_ts: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub learners: BTreeMap<String, LearnerState>,
    /// Live item difficulties; unlisted exercises keep their seed rating.
    pub ratings: BTreeMap<String, DifficultyRating>,
    pub last_ts: i64,
    pub event_count: u64,
}

impl EngineState {
    pub fn active_session(&self, learner: &str) -> Option<&SessionState> {
        let l = self.learners.get(learner)?;
        l.sessions.get(l.active.as_ref()?)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot apply {kind} event at ts {ts} for learner {learner}: {message}")]
pub struct ReplayError {
    pub ts: i64,
    pub learner: String,
    pub kind: &'static str,
    pub message: String,
}

/// The state transition for one event.
pub fn apply_event(state: &mut EngineState, rec: &EventRecord) -> Result<(), ReplayError> {
    let fail = |message: String| ReplayError {
        ts: rec.ts,
        learner: rec.learner.clone(),
        kind: rec.event.kind(),
        message,
    };
    let phase_err = |p: Phase| fail(format!("not allowed in phase {p}"));

    match &rec.event {
        Event::Login { mode } | Event::ConceptStart { mode, .. } => {
            let learner = state
                .learners
                .entry(rec.learner.clone())
                .or_insert_with(|| LearnerState {
                    mode: *mode,
                    active: None,
                    sessions: BTreeMap::new(),
                    mastered: BTreeSet::new(),
                    last_ts: i64::MIN,
                });
            if learner.mode != *mode {
                return Err(fail(format!(
                    "learner is in {} mode, event says {mode}",
                    learner.mode
                )));
            }
        }
        _ => {}
    }

    let learner = state
        .learners
        .get_mut(&rec.learner)
        .ok_or_else(|| fail("unknown learner".into()))?;
    if rec.ts <= learner.last_ts {
        return Err(fail(format!(
            "timestamp {} not after {}",
            rec.ts, learner.last_ts
        )));
    }
    learner.last_ts = rec.ts;
    state.last_ts = state.last_ts.max(rec.ts);
    state.event_count += 1;

    if let Event::Login { .. } = rec.event {
        return Ok(());
    }
    if let Event::ConceptStart {
        language,
        concept,
        resumed,
        pretest_items,
        ..
    } = &rec.event
    {
        let exists = learner.sessions.contains_key(&rec.session);
        if exists != *resumed {
            return Err(fail(format!(
                "resumed={resumed} but session exists={exists}"
            )));
        }
        if !exists {
            learner.sessions.insert(
                rec.session.clone(),
                SessionState {
                    id: rec.session.clone(),
                    learner: rec.learner.clone(),
                    language_id: language.clone(),
                    concept_id: concept.clone(),
                    phase: Phase::NeedsPretest,
                    current_exercise: None,
                    pending: None,
                    staged: None,
                    skill: SkillState::new(0.0),
                    solved_correct: BTreeSet::new(),
                    rated: BTreeSet::new(),
                    pretest_items: pretest_items.clone(),
                    skip_streak: BTreeSet::new(),
                    feedback_text: None,
                },
            );
        }
        learner.active = Some(rec.session.clone());
        return Ok(());
    }

    let session = learner
        .sessions
        .get_mut(&rec.session)
        .ok_or_else(|| fail(format!("unknown session {}", rec.session)))?;

    match &rec.event {
        Event::Login { .. } | Event::ConceptStart { .. } => unreachable!("handled above"),
        Event::PretestSubmit {
            items,
            passed,
            theta,
            ..
        } => {
            if session.phase != Phase::NeedsPretest {
                return Err(phase_err(session.phase));
            }
            session.skill = SkillState::new(*theta);
            for (item, ok) in items.iter().zip(passed) {
                if *ok {
                    session.solved_correct.insert(item.clone());
                }
            }
        }
        Event::ExerciseAssigned { exercise, via, .. } => {
            let allowed = match via {
                AssignVia::Pretest => session.phase == Phase::NeedsPretest,
                AssignVia::Skip => session.phase == Phase::InExercise,
                AssignVia::Decision => matches!(
                    session.phase,
                    Phase::AwaitingRecommendationDecision | Phase::AwaitingRepeatDecision
                ),
            };
            if !allowed {
                return Err(phase_err(session.phase));
            }
            session.phase = Phase::InExercise;
            session.current_exercise = Some(exercise.clone());
            session.pending = None;
            session.staged = None;
            session.feedback_text = None;
            if *via != AssignVia::Skip {
                session.skip_streak.clear();
            }
        }
        Event::Run { exercise, .. } => {
            if session.phase != Phase::InExercise
                || session.current_exercise.as_ref() != Some(exercise)
            {
                return Err(phase_err(session.phase));
            }
        }
        Event::Submission {
            exercise,
            all_passed,
            first_attempt,
            rating,
            ..
        } => {
            if session.phase != Phase::InExercise
                || session.current_exercise.as_ref() != Some(exercise)
            {
                return Err(phase_err(session.phase));
            }
            if *first_attempt == session.rated.contains(exercise) {
                return Err(fail(
                    "first_attempt flag disagrees with rating history".into(),
                ));
            }
            if let Some(r) = rating {
                if !first_attempt {
                    return Err(fail("rating update on a repeat attempt".into()));
                }
                session.skill = SkillState {
                    theta: r.theta,
                    attempts: r.skill_attempts,
                };
                state.ratings.insert(
                    exercise.clone(),
                    DifficultyRating {
                        d: r.d,
                        attempts: r.item_attempts,
                    },
                );
                session.rated.insert(exercise.clone());
            }
            if *all_passed {
                session.solved_correct.insert(exercise.clone());
            }
            session.skip_streak.clear();
        }
        Event::FeedbackShown { text, .. } => {
            session.feedback_text = Some(text.clone());
        }
        Event::RecommendationShown {
            from_exercise,
            genai_candidate,
            reason,
            adaptive_candidate,
            repeated,
            offered,
            phase,
        } => {
            if session.phase != Phase::InExercise {
                return Err(phase_err(session.phase));
            }
            let pending = PendingRecommendation {
                from_exercise: from_exercise.clone(),
                genai_candidate: genai_candidate.clone().map(|id| GenAiCandidate {
                    exercise_id: id,
                    reason: reason.clone(),
                }),
                adaptive_candidate: adaptive_candidate.clone(),
                repeated: *repeated,
                offered: offered.clone(),
            };
            match phase {
                Phase::AwaitingAgreement => session.staged = Some(pending),
                Phase::AwaitingRecommendationDecision | Phase::AwaitingRepeatDecision => {
                    session.pending = Some(pending)
                }
                other => return Err(fail(format!("recommendation cannot lead to phase {other}"))),
            }
            session.phase = *phase;
            session.current_exercise = None;
        }
        Event::Agreement { rating, next_phase } => {
            if session.phase != Phase::AwaitingAgreement {
                return Err(phase_err(session.phase));
            }
            if *rating > 5 {
                return Err(fail(format!("rating {rating} out of range")));
            }
            session.pending = session.staged.take();
            session.phase = *next_phase;
        }
        Event::RecommendationDecision {
            chosen, exercise, ..
        } => {
            if !matches!(
                session.phase,
                Phase::AwaitingRecommendationDecision | Phase::AwaitingRepeatDecision
            ) {
                return Err(phase_err(session.phase));
            }
            let pending = session
                .pending
                .as_mut()
                .ok_or_else(|| fail("no pending recommendation".into()))?;
            if !pending.offered.contains(chosen) {
                return Err(fail(format!("choice {chosen} was not offered")));
            }
            if exercise.is_none() {
                pending.offered = vec![Choice::RepeatGenAi, Choice::UseAdaptive];
                session.phase = Phase::AwaitingRepeatDecision;
            }
        }
        Event::Skip { exercise } => {
            if session.phase != Phase::InExercise
                || session.current_exercise.as_ref() != Some(exercise)
            {
                return Err(phase_err(session.phase));
            }
            session.skip_streak.insert(exercise.clone());
        }
        Event::ConceptMastered { .. } => {
            session.phase = Phase::ConceptComplete;
            session.current_exercise = None;
            session.pending = None;
            session.staged = None;
            learner.mastered.insert(session.concept_id.clone());
        }
    }
    Ok(())
}

/// Rebuilds engine state from a complete event stream.
pub fn reconstruct<'a>(
    records: impl IntoIterator<Item = &'a EventRecord>,
) -> Result<EngineState, ReplayError> {
    let mut state = EngineState::default();
    for r in records {
        apply_event(&mut state, r)?;
    }
    Ok(state)
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown learner {0}")]
    UnknownLearner(String),
    #[error("learner {learner} is assigned to {existing} mode")]
    ModeMismatch { learner: String, existing: Mode },
    #[error("no concept has been started")]
    NoActiveSession,
    #[error("operation not allowed in phase {phase}")]
    WrongPhase { phase: Phase },
    #[error("{0} mode has no feedback agreement step")]
    NoAgreementStep(Mode),
    #[error("rating {0} is outside 1..=5")]
    RatingOutOfRange(i64),
    #[error("choice {choice} is not offered in phase {phase}")]
    InvalidChoice {
        choice: Choice,
        phase: Phase,
        offered: Vec<Choice>,
    },
    #[error("pretest needs exactly 3 submissions, got {0}")]
    PretestArity(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Elo(#[from] EloError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("event log write failed: {0}")]
    Log(#[from] io::Error),
    #[error(transparent)]
    Internal(#[from] ReplayError),
}

impl SessionError {
    /// The phase to report with a wrong-phase style error.
    pub fn phase(&self) -> Option<Phase> {
        match self {
            SessionError::WrongPhase { phase } | SessionError::InvalidChoice { phase, .. } => {
                Some(*phase)
            }
            _ => None,
        }
    }
}

/// Everything the engine talks to.
pub struct EngineParts {
    pub kg: SharedGraph,
    pub runner: Arc<dyn CodeRunner>,
    pub llm: Arc<dyn LlmClient>,
    pub embedder: Arc<dyn Embedder>,
    pub memory: Arc<dyn MemoryStore>,
    pub clock: Arc<dyn Clock>,
    pub sink: Arc<dyn EventSink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub mode: Mode,
    pub language_id: String,
    pub concept_id: String,
    pub phase: Phase,
    pub current_exercise: Option<String>,
    pub pending: Option<PendingRecommendation>,
    pub pretest_items: Vec<String>,
    pub feedback_text: Option<String>,
    pub progress: Progress,
    /// Suggested next concept once this one is complete.
    pub next_concept: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub theta: f64,
    pub level: Level,
    pub progress_fraction: f64,
    pub solved_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestOutcome {
    pub passed: Vec<bool>,
    pub placement: Placement,
    pub assigned: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub output: String,
    pub timed_out: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionOutcome {
    pub exercise: String,
    pub classification: Classification,
    pub all_passed: bool,
    pub failed_cases: Vec<FailedCase>,
    /// Model feedback; absent in adaptive mode, where the failed cases are
    /// the only feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackPayload>,
    pub recommendation: Option<PendingRecommendation>,
    pub phase: Phase,
    pub mastered: bool,
    pub next_concept: Option<String>,
    /// The model was unreachable and the adaptive fallback was used.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub phase: Phase,
    pub assigned: Option<String>,
    pub source: Option<Source>,
}

/// What the model produced for one submission.
struct ModelFeedback {
    text: String,
    candidate: Option<GenAiCandidate>,
    unavailable: bool,
    parse_failed: bool,
    reformulation_degraded: bool,
}

pub struct Engine {
    kg: SharedGraph,
    index: RwLock<Arc<VectorIndex>>,
    runner: Arc<dyn CodeRunner>,
    llm: Arc<dyn LlmClient>,
    embedder: Arc<dyn Embedder>,
    memory: Arc<dyn MemoryStore>,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn EventSink>,
    config: EngineConfig,
    state: Mutex<EngineState>,
    learner_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Engine {
    pub fn new(parts: EngineParts, config: EngineConfig) -> Result<Self, SessionError> {
        Self::with_state(parts, config, EngineState::default())
    }

    /// Starts from a state rebuilt elsewhere, e.g. by replaying a log.
    pub fn with_state(
        parts: EngineParts,
        config: EngineConfig,
        state: EngineState,
    ) -> Result<Self, SessionError> {
        config.elo.validate()?;
        let index = index_graph(&parts.kg.read(), parts.embedder.as_ref())?;
        Ok(Self {
            kg: parts.kg,
            index: RwLock::new(Arc::new(index)),
            runner: parts.runner,
            llm: parts.llm,
            embedder: parts.embedder,
            memory: parts.memory,
            clock: parts.clock,
            sink: parts.sink,
            config,
            state: Mutex::new(state),
            learner_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn graph(&self) -> Arc<KnowledgeGraph> {
        self.kg.read().clone()
    }

    pub fn state(&self) -> EngineState {
        self.state.lock().clone()
    }

    /// Swaps in a new graph and rebuilds the retrieval index.
    pub fn reload_graph(&self, kg: KnowledgeGraph) -> Result<(), SessionError> {
        let index = index_graph(&kg, self.embedder.as_ref())?;
        let mut idx = self.index.write();
        *self.kg.write() = Arc::new(kg);
        *idx = Arc::new(index);
        Ok(())
    }

    fn learner_lock(&self, learner: &str) -> Arc<Mutex<()>> {
        self.learner_locks
            .lock()
            .entry(learner.to_string())
            .or_default()
            .clone()
    }

    /// Builds a batch from the current state, appends it to the log and
    /// applies it, all under the state lock.
    fn commit(
        &self,
        learner: &str,
        session: &str,
        build: impl FnOnce(&EngineState) -> Result<Vec<Event>, SessionError>,
    ) -> Result<Vec<EventRecord>, SessionError> {
        let mut st = self.state.lock();
        let events = build(&st)?;
        let mut ts = st.last_ts;
        let records: Vec<EventRecord> = events
            .into_iter()
            .map(|event| {
                ts = self.clock.now_ms().max(ts + 1);
                EventRecord {
                    ts,
                    learner: learner.to_string(),
                    session: session.to_string(),
                    event,
                }
            })
            .collect();
        self.sink.append(&records)?;
        for r in &records {
            apply_event(&mut st, r)?;
        }
        Ok(records)
    }

    fn learner_mode(&self, learner: &str) -> Result<Mode, SessionError> {
        self.state
            .lock()
            .learners
            .get(learner)
            .map(|l| l.mode)
            .ok_or_else(|| SessionError::UnknownLearner(learner.to_string()))
    }

    fn snapshot(
        &self,
        learner: &str,
    ) -> Result<(Mode, SessionState, BTreeSet<String>), SessionError> {
        let st = self.state.lock();
        let l = st
            .learners
            .get(learner)
            .ok_or_else(|| SessionError::UnknownLearner(learner.to_string()))?;
        let s = l
            .active
            .as_ref()
            .and_then(|id| l.sessions.get(id))
            .ok_or(SessionError::NoActiveSession)?;
        Ok((l.mode, s.clone(), l.mastered.clone()))
    }

    fn current_exercise(&self, session: &SessionState) -> Result<Exercise, SessionError> {
        if session.phase != Phase::InExercise {
            return Err(SessionError::WrongPhase {
                phase: session.phase,
            });
        }
        let id = session
            .current_exercise
            .as_ref()
            .ok_or(SessionError::WrongPhase {
                phase: session.phase,
            })?;
        self.graph()
            .exercise(id)
            .cloned()
            .ok_or_else(|| SessionError::Graph(GraphError::Dangling(vec![id.clone()])))
    }

    /// Registers the learner (first login) and logs the login.
    pub fn login(&self, learner: &str, mode: Mode) -> Result<(), SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        self.commit(learner, "", |st| {
            if let Some(l) = st.learners.get(learner) {
                if l.mode != mode {
                    return Err(SessionError::ModeMismatch {
                        learner: learner.to_string(),
                        existing: l.mode,
                    });
                }
            }
            Ok(vec![Event::Login { mode }])
        })?;
        Ok(())
    }

    /// Opens a concept: a fresh one starts with the pretest, a known one
    /// resumes where the learner left it.
    pub fn start_concept(
        &self,
        learner: &str,
        language_id: &str,
        concept_id: &str,
    ) -> Result<SessionView, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let mode = self.learner_mode(learner)?;
        let kg = self.graph();
        let exercises = kg.exercises_for(language_id, concept_id, None, &HashSet::new())?;
        if exercises.is_empty() {
            return Err(EloError::NoExercises(concept_id.to_string()).into());
        }
        let sid = session_id(learner, language_id, concept_id);
        self.commit(learner, &sid, |st| {
            let existing = st.learners.get(learner).and_then(|l| l.sessions.get(&sid));
            let (resumed, pretest_items) = match existing {
                Some(s) => (true, s.pretest_items.clone()),
                None => (false, pretest_items(&exercises)),
            };
            Ok(vec![Event::ConceptStart {
                mode,
                language: language_id.to_string(),
                concept: concept_id.to_string(),
                resumed,
                pretest_items,
            }])
        })?;
        self.view(learner)
    }

    /// Grades the three pretest items, places the learner and assigns the
    /// first exercise from the placement level.
    pub fn submit_pretest(
        &self,
        learner: &str,
        codes: &[String],
    ) -> Result<PretestOutcome, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (_, session, _) = self.snapshot(learner)?;
        if session.phase != Phase::NeedsPretest {
            return Err(SessionError::WrongPhase {
                phase: session.phase,
            });
        }
        if codes.len() != 3 || session.pretest_items.len() != 3 {
            return Err(SessionError::PretestArity(codes.len()));
        }
        let kg = self.graph();
        let mut outcomes = Vec::new();
        for (item, code) in session.pretest_items.iter().zip(codes) {
            let ex = kg
                .exercise(item)
                .ok_or_else(|| SessionError::Graph(GraphError::Dangling(vec![item.clone()])))?;
            outcomes.push(assess(ex, code, self.runner.as_ref())?);
        }
        let passed: Vec<bool> = outcomes.iter().map(|o| o.all_passed).collect();
        let placement = place_from_pretest(&passed, &self.config.elo)?;

        let mut assigned = String::new();
        self.commit(learner, &session.id, |st| {
            let mut solved = session.solved_set();
            for (item, ok) in session.pretest_items.iter().zip(&passed) {
                if *ok {
                    solved.insert(item.clone());
                }
            }
            let skill = SkillState::new(placement.initial_theta);
            let first = select_next_exercise(
                &kg,
                &session.language_id,
                &session.concept_id,
                &skill,
                &st.ratings,
                &Selection {
                    solved: Some(&solved),
                    exclude: Vec::new(),
                    level: Some(placement.initial_level),
                },
            )?;
            assigned = first.id.clone();
            Ok(vec![
                Event::PretestSubmit {
                    items: session.pretest_items.clone(),
                    passed: passed.clone(),
                    classifications: outcomes.iter().map(|o| o.classification).collect(),
                    theta: placement.initial_theta,
                    level: placement.initial_level,
                },
                Event::ExerciseAssigned {
                    exercise: first.id.clone(),
                    source: Source::Adaptive,
                    via: AssignVia::Pretest,
                },
            ])
        })?;
        Ok(PretestOutcome {
            passed,
            placement,
            assigned,
        })
    }

    /// Runs the code once with the first test case's inputs.
    pub fn run(&self, learner: &str, code: &str) -> Result<RunOutcome, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (_, session, _) = self.snapshot(learner)?;
        let ex = self.current_exercise(&session)?;
        let capture = run_once(&ex, code, self.runner.as_ref())?;
        let timed_out = matches!(capture.status, RunStatus::TimedOut);
        self.commit(learner, &session.id, |_| {
            Ok(vec![Event::Run {
                exercise: ex.id.clone(),
                timed_out,
            }])
        })?;
        Ok(RunOutcome {
            output: capture.stdout,
            timed_out,
            truncated: capture.truncated,
        })
    }

    /// Grades a submission and drives the mode's feedback flow.
    pub fn submit(&self, learner: &str, code: &str) -> Result<SubmissionOutcome, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (mode, session, _) = self.snapshot(learner)?;
        let ex = self.current_exercise(&session)?;
        let outcome = assess(&ex, code, self.runner.as_ref())?;
        let kg = self.graph();
        let params = self.config.elo;

        // Grading, rating update and (for adaptive mode) the next suggestion.
        let records = self.commit(learner, &session.id, |st| {
            let first_attempt = !session.rated.contains(&ex.id);
            let mut skill = session.skill;
            let mut rating = None;
            if first_attempt {
                let (s, d) = update_ratings(
                    session.skill,
                    st.ratings.rating_of(&ex),
                    outcome.all_passed,
                    &params,
                );
                skill = s;
                rating = Some(RatingChange {
                    theta: s.theta,
                    skill_attempts: s.attempts,
                    d: d.d,
                    item_attempts: d.attempts,
                });
            }
            let mut events = vec![Event::Submission {
                exercise: ex.id.clone(),
                classification: outcome.classification,
                all_passed: outcome.all_passed,
                first_attempt,
                rating,
            }];
            if rating.is_some() && mastery_reached(skill.theta, &params) {
                let mut mastered = st
                    .learners
                    .get(learner)
                    .map(|l| l.mastered.clone())
                    .unwrap_or_default();
                mastered.insert(session.concept_id.clone());
                events.push(Event::ConceptMastered {
                    theta: skill.theta,
                    next_concept: next_concept_id(&kg, &session, &mastered),
                });
            } else if mode == Mode::Adaptive && outcome.all_passed {
                let mut solved = session.solved_set();
                solved.insert(ex.id.clone());
                let next = adaptive_pick(&kg, &session, &skill, st, &solved, &[&ex.id])?;
                events.push(Event::RecommendationShown {
                    from_exercise: ex.id.clone(),
                    genai_candidate: None,
                    reason: None,
                    adaptive_candidate: Some(next),
                    repeated: false,
                    offered: vec![Choice::UseAdaptive],
                    phase: Phase::AwaitingRecommendationDecision,
                });
            }
            Ok(events)
        })?;

        let mut result = SubmissionOutcome {
            exercise: ex.id.clone(),
            classification: outcome.classification,
            all_passed: outcome.all_passed,
            failed_cases: failed_cases_view(&ex, &outcome.results),
            feedback: None,
            recommendation: None,
            phase: Phase::InExercise,
            mastered: false,
            next_concept: None,
            degraded: false,
        };
        for r in &records {
            if let Event::ConceptMastered { next_concept, .. } = &r.event {
                result.mastered = true;
                result.next_concept = next_concept.clone();
            }
        }

        if mode != Mode::Adaptive {
            self.genai_flow(learner, mode, &ex, code, &mut result)?;
        }

        let (_, after, _) = self.snapshot(learner)?;
        result.phase = after.phase;
        result.recommendation = after.pending.clone().or(after.staged.clone());
        Ok(result)
    }

    fn ask_model(
        &self,
        session: &SessionState,
        mastered: &BTreeSet<String>,
        ex: &Exercise,
        code: &str,
    ) -> ModelFeedback {
        let kg = self.graph();
        let learner = &session.learner;
        let memory = self.memory.load(learner).unwrap_or_else(|e| {
            tracing::warn!(learner, error = %e, "chat memory unreadable, starting empty");
            crate::genai::ChatMemory::new(learner.clone())
        });
        let history = render_history(&memory, self.config.memory_window);

        let query = format!("{}\n{}", ex.statements.en, code);
        let reformulated = reformulate_query(&history, &query, self.llm.as_ref());
        let solved = session.solved_set();
        let mastered: HashSet<String> = mastered.iter().cloned().collect();
        let index = self.index.read().clone();
        let context = match retrieve_context(
            &kg,
            &index,
            self.embedder.as_ref(),
            LearnerScope {
                language_id: &session.language_id,
                concept_id: &session.concept_id,
                solved: &solved,
                mastered: &mastered,
            },
            &reformulated.text,
            self.config.retrieval_k,
        ) {
            Ok(c) => c.block,
            Err(e) => {
                tracing::warn!(learner, error = %e, "retrieval failed, prompting without context");
                String::new()
            }
        };

        let bundle = PromptBundle {
            question_content: ex.statements.en.clone(),
            correct_code: ex.reference_solution.clone(),
            submitted_code: code.to_string(),
            chat_history: history,
            context,
        };
        let mut feedback = ModelFeedback {
            text: UNAVAILABLE_NOTICE.to_string(),
            candidate: None,
            unavailable: false,
            parse_failed: false,
            reformulation_degraded: reformulated.degraded,
        };
        match generate_feedback(self.llm.as_ref(), &bundle, &self.config.retry) {
            Ok(resp) => {
                self.remember(learner, Role::Learner, code);
                self.remember(learner, Role::Assistant, &resp.text);
                match parse_feedback(&resp, &kg) {
                    Ok(p) => {
                        feedback.text = p.feedback_text;
                        feedback.candidate = p.recommended_exercise_id.map(|id| GenAiCandidate {
                            exercise_id: id,
                            reason: p.recommended_reason,
                        });
                    }
                    Err(e) => {
                        feedback.text = e.feedback_text;
                        feedback.parse_failed = true;
                    }
                }
            }
            Err(e) => {
                tracing::warn!(learner, error = %e, "falling back to adaptive recommendation");
                feedback.unavailable = true;
            }
        }
        feedback
    }

    fn remember(&self, learner: &str, role: Role, text: &str) {
        let turn = Turn {
            role,
            text: text.to_string(),
            ts: self.clock.now_ms(),
        };
        if let Err(e) = self.memory.append(learner, &turn) {
            tracing::warn!(learner, error = %e, "could not persist chat turn");
        }
    }

    fn genai_flow(
        &self,
        learner: &str,
        mode: Mode,
        ex: &Exercise,
        code: &str,
        result: &mut SubmissionOutcome,
    ) -> Result<(), SessionError> {
        let (_, session, mastered) = self.snapshot(learner)?;
        let fb = self.ask_model(&session, &mastered, ex, code);
        let kg = self.graph();
        let source = if fb.candidate.is_some() {
            FeedbackSource::GenAi
        } else {
            FeedbackSource::AdaptiveFallback
        };
        let mut repeated = false;

        self.commit(learner, &session.id, |st| {
            let live = st
                .active_session(learner)
                .ok_or(SessionError::NoActiveSession)?;
            let mut events = vec![Event::FeedbackShown {
                exercise: ex.id.clone(),
                source,
                text: fb.text.clone(),
                unavailable: fb.unavailable,
                parse_failed: fb.parse_failed,
                reformulation_degraded: fb.reformulation_degraded,
            }];
            if live.phase == Phase::ConceptComplete {
                return Ok(events);
            }
            repeated = fb
                .candidate
                .as_ref()
                .is_some_and(|c| live.solved_correct.contains(&c.exercise_id));
            let needs_adaptive = mode == Mode::Hybrid || repeated || fb.candidate.is_none();
            let adaptive = if needs_adaptive {
                Some(adaptive_pick(
                    &kg,
                    live,
                    &live.skill,
                    st,
                    &live.solved_set(),
                    &[&ex.id],
                )?)
            } else {
                None
            };
            let offered = match (mode, fb.candidate.is_some(), repeated) {
                (Mode::Hybrid, true, _) => vec![
                    Choice::AcceptGenAi,
                    Choice::UseAdaptive,
                    Choice::DeclineAdaptive,
                ],
                (Mode::Hybrid, false, _) => vec![Choice::UseAdaptive, Choice::DeclineAdaptive],
                (_, true, false) => vec![Choice::AcceptGenAi],
                (_, true, true) => vec![Choice::RepeatGenAi, Choice::UseAdaptive],
                (_, false, _) => vec![Choice::UseAdaptive],
            };
            let phase = if fb.unavailable {
                Phase::AwaitingRecommendationDecision
            } else {
                Phase::AwaitingAgreement
            };
            events.push(Event::RecommendationShown {
                from_exercise: ex.id.clone(),
                genai_candidate: fb.candidate.as_ref().map(|c| c.exercise_id.clone()),
                reason: fb.candidate.as_ref().and_then(|c| c.reason.clone()),
                adaptive_candidate: adaptive,
                repeated,
                offered,
                phase,
            });
            Ok(events)
        })?;

        result.degraded = fb.unavailable;
        result.feedback = Some(FeedbackPayload {
            feedback_text: fb.text,
            recommended_exercise_id: fb.candidate.as_ref().map(|c| c.exercise_id.clone()),
            recommended_reason: fb.candidate.and_then(|c| c.reason),
            repeated,
            source,
        });
        Ok(())
    }

    /// Records the learner's helpfulness rating (1..=5).
    pub fn record_agreement(&self, learner: &str, rating: i64) -> Result<Phase, SessionError> {
        if !(1..=5).contains(&rating) {
            let mode = self.learner_mode(learner)?;
            if mode == Mode::Adaptive {
                return Err(SessionError::NoAgreementStep(mode));
            }
            return Err(SessionError::RatingOutOfRange(rating));
        }
        self.agreement(learner, rating as u8)
    }

    /// Moves past the rating question without answering it.
    pub fn skip_agreement(&self, learner: &str) -> Result<Phase, SessionError> {
        self.agreement(learner, 0)
    }

    fn agreement(&self, learner: &str, rating: u8) -> Result<Phase, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (mode, session, _) = self.snapshot(learner)?;
        if mode == Mode::Adaptive {
            return Err(SessionError::NoAgreementStep(mode));
        }
        if session.phase != Phase::AwaitingAgreement {
            return Err(SessionError::WrongPhase {
                phase: session.phase,
            });
        }
        let repeated = session.staged.as_ref().is_some_and(|p| p.repeated);
        let next_phase = if mode == Mode::GenAi && repeated {
            Phase::AwaitingRepeatDecision
        } else {
            Phase::AwaitingRecommendationDecision
        };
        self.commit(learner, &session.id, |_| {
            Ok(vec![Event::Agreement { rating, next_phase }])
        })?;
        Ok(next_phase)
    }

    /// Applies the learner's choice between the offered recommendations.
    pub fn resolve_recommendation(
        &self,
        learner: &str,
        choice: Choice,
    ) -> Result<DecisionOutcome, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (_, session, _) = self.snapshot(learner)?;
        let phase = session.phase;
        let pending = match (&session.pending, phase) {
            (Some(p), Phase::AwaitingRecommendationDecision | Phase::AwaitingRepeatDecision) => {
                p.clone()
            }
            _ => return Err(SessionError::WrongPhase { phase }),
        };
        if !pending.offered.contains(&choice) {
            return Err(SessionError::InvalidChoice {
                choice,
                phase,
                offered: pending.offered.clone(),
            });
        }
        let kg = self.graph();
        let mut out = DecisionOutcome {
            phase,
            assigned: None,
            source: None,
        };
        self.commit(learner, &session.id, |st| {
            let genai_id = || {
                pending
                    .genai_candidate
                    .as_ref()
                    .map(|c| c.exercise_id.clone())
                    .ok_or(SessionError::InvalidChoice {
                        choice,
                        phase,
                        offered: pending.offered.clone(),
                    })
            };
            let (exercise, source) = match choice {
                Choice::AcceptGenAi
                    if pending.repeated && phase == Phase::AwaitingRecommendationDecision =>
                {
                    (None, None)
                }
                Choice::AcceptGenAi | Choice::RepeatGenAi => {
                    (Some(genai_id()?), Some(Source::GenAi))
                }
                Choice::UseAdaptive => {
                    let id = match &pending.adaptive_candidate {
                        Some(id) => id.clone(),
                        None => adaptive_pick(
                            &kg,
                            &session,
                            &session.skill,
                            st,
                            &session.solved_set(),
                            &[&pending.from_exercise],
                        )?,
                    };
                    (Some(id), Some(Source::Adaptive))
                }
                Choice::DeclineAdaptive => {
                    let mut exclude = vec![pending.from_exercise.as_str()];
                    if let Some(a) = &pending.adaptive_candidate {
                        exclude.push(a);
                    }
                    let id = adaptive_pick(
                        &kg,
                        &session,
                        &session.skill,
                        st,
                        &session.solved_set(),
                        &exclude,
                    )?;
                    (Some(id), Some(Source::Adaptive))
                }
            };
            let mut events = vec![Event::RecommendationDecision {
                phase,
                offered: pending.offered.clone(),
                chosen: choice,
                repeated: pending.repeated,
                exercise: exercise.clone(),
                source,
            }];
            if let (Some(id), Some(src)) = (&exercise, source) {
                events.push(Event::ExerciseAssigned {
                    exercise: id.clone(),
                    source: src,
                    via: AssignVia::Decision,
                });
            }
            out.assigned = exercise;
            out.source = source;
            Ok(events)
        })?;
        out.phase = self.snapshot(learner)?.1.phase;
        Ok(out)
    }

    /// Abandons the current exercise for another adaptive pick.
    pub fn request_other_exercise(&self, learner: &str) -> Result<String, SessionError> {
        let lock = self.learner_lock(learner);
        let _g = lock.lock();
        let (_, session, _) = self.snapshot(learner)?;
        let ex = self.current_exercise(&session)?;
        let kg = self.graph();
        let mut assigned = String::new();
        self.commit(learner, &session.id, |st| {
            let solved = session.solved_set();
            let mut avoid: Vec<&str> = session.skip_streak.iter().map(String::as_str).collect();
            avoid.push(&ex.id);
            let mut next = adaptive_pick(&kg, &session, &session.skill, st, &solved, &avoid)?;
            if avoid.contains(&next.as_str()) {
                next = adaptive_pick(&kg, &session, &session.skill, st, &solved, &[&ex.id])?;
            }
            assigned = next.clone();
            Ok(vec![
                Event::Skip {
                    exercise: ex.id.clone(),
                },
                Event::ExerciseAssigned {
                    exercise: next,
                    source: Source::Adaptive,
                    via: AssignVia::Skip,
                },
            ])
        })?;
        Ok(assigned)
    }

    pub fn progress(&self, learner: &str) -> Result<Progress, SessionError> {
        let (_, session, _) = self.snapshot(learner)?;
        Ok(progress_of(&session, &self.config.elo))
    }

    pub fn view(&self, learner: &str) -> Result<SessionView, SessionError> {
        let (mode, session, mastered) = self.snapshot(learner)?;
        let next_concept = if session.phase == Phase::ConceptComplete {
            next_concept_id(&self.graph(), &session, &mastered)
        } else {
            None
        };
        Ok(SessionView {
            session_id: session.id.clone(),
            mode,
            language_id: session.language_id.clone(),
            concept_id: session.concept_id.clone(),
            phase: session.phase,
            current_exercise: session.current_exercise.clone(),
            pending: session.pending.clone().or(session.staged.clone()),
            pretest_items: session.pretest_items.clone(),
            feedback_text: session.feedback_text.clone(),
            progress: progress_of(&session, &self.config.elo),
            next_concept,
        })
    }

    /// Concepts the learner has mastered.
    pub fn mastered(&self, learner: &str) -> BTreeSet<String> {
        self.state
            .lock()
            .learners
            .get(learner)
            .map(|l| l.mastered.clone())
            .unwrap_or_default()
    }
}

fn progress_of(session: &SessionState, params: &EloParams) -> Progress {
    Progress {
        theta: session.skill.theta,
        level: level_of(session.skill.theta, params),
        progress_fraction: progress_fraction(session.skill.theta, params),
        solved_count: session.solved_correct.len(),
    }
}

fn next_concept_id(
    kg: &KnowledgeGraph,
    session: &SessionState,
    mastered: &BTreeSet<String>,
) -> Option<String> {
    let mastered: HashSet<String> = mastered.iter().cloned().collect();
    kg.next_concept(&session.language_id, &session.concept_id, &mastered)
        .ok()
        .flatten()
        .map(|c| c.id.clone())
}

/// One item per level: the lowest id at that level, or the lowest unused
/// id when a level has no exercise.
fn pretest_items(exercises: &[&Exercise]) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    for level in Level::ALL {
        let pick = exercises
            .iter()
            .find(|e| e.level == level && !items.contains(&e.id))
            .or_else(|| exercises.iter().find(|e| !items.contains(&e.id)))
            .or_else(|| exercises.first());
        if let Some(e) = pick {
            items.push(e.id.clone());
        }
    }
    items
}

fn adaptive_pick(
    kg: &KnowledgeGraph,
    session: &SessionState,
    skill: &SkillState,
    st: &EngineState,
    solved: &HashSet<String>,
    exclude: &[&str],
) -> Result<String, SessionError> {
    let ex = select_next_exercise(
        kg,
        &session.language_id,
        &session.concept_id,
        skill,
        &st.ratings,
        &Selection {
            solved: Some(solved),
            exclude: exclude.to_vec(),
            level: None,
        },
    )?;
    Ok(ex.id.clone())
}
