//! Simulated learners: deterministic cohorts that exercise every mode end
//! to end, plus a pure rating-recovery simulation.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{run_tests, CodeRunner, RunnerError, IDENTITY_LANGUAGE};
use crate::elo::{expected_success, update_ratings, DifficultyRating, EloParams, SkillState};
use crate::events::{Choice, EventRecord, MemorySink, Mode, Phase, StepClock};
use crate::genai::InMemoryStore;
use crate::graph::{Exercise, KnowledgeGraph};
use crate::llm::{CountingLlm, ReferenceLlm};
use crate::rag::HashEmbedder;
use crate::session::{shared_graph, Engine, EngineConfig, EngineParts, EngineState, SessionError};

/// First timestamp of a simulated log (2024-01-01T00:00:00Z).
pub const SIM_EPOCH_MS: i64 = 1_704_067_200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionPolicy {
    AlwaysAcceptGenai,
    AlwaysUseAdaptive,
    /// Follows the GenAI option with this probability.
    CoinFlip(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementPolicy {
    Fixed(u8),
    /// Weights for ratings 1..=5.
    Distribution([f64; 5]),
}

/// One simulated learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimLearnerProfile {
    pub true_theta: f64,
    pub slip: f64,
    pub guess: f64,
    pub policy: DecisionPolicy,
    pub agreement: AgreementPolicy,
    pub skip_prob: f64,
    pub run_prob: f64,
    pub empty_prob: f64,
}

impl SimLearnerProfile {
    /// Probability that an attempt at difficulty `d` is correct.
    pub fn success_probability(&self, d: f64) -> f64 {
        let p = expected_success(self.true_theta, d);
        ((1.0 - self.slip) * p + self.guess * (1.0 - p)).clamp(0.0, 1.0)
    }
}

/// Population the cohort's learners are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimProfile {
    pub theta_mean: f64,
    pub theta_sd: f64,
    pub slip: f64,
    pub guess: f64,
    pub policy: DecisionPolicy,
    pub agreement: AgreementPolicy,
    pub skip_prob: f64,
    pub run_prob: f64,
    pub empty_prob: f64,
}

impl Default for SimProfile {
    fn default() -> Self {
        Self {
            theta_mean: 0.0,
            theta_sd: 0.8,
            slip: 0.05,
            guess: 0.02,
            policy: DecisionPolicy::CoinFlip(0.5),
            agreement: AgreementPolicy::Distribution([0.05, 0.1, 0.25, 0.35, 0.25]),
            skip_prob: 0.05,
            run_prob: 0.05,
            empty_prob: 0.02,
        }
    }
}

impl SimProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [
            ("slip", self.slip),
            ("guess", self.guess),
            ("skip_prob", self.skip_prob),
            ("run_prob", self.run_prob),
            ("empty_prob", self.empty_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Profile(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if !self.theta_mean.is_finite() || !(self.theta_sd.is_finite() && self.theta_sd >= 0.0) {
            return Err(SimError::Profile(
                "theta_mean must be finite and theta_sd >= 0".into(),
            ));
        }
        if let DecisionPolicy::CoinFlip(p) = self.policy {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Profile(format!(
                    "coin_flip must be in [0, 1], got {p}"
                )));
            }
        }
        match self.agreement {
            AgreementPolicy::Fixed(r) if !(1..=5).contains(&r) => Err(SimError::Profile(format!(
                "fixed agreement must be 1..=5, got {r}"
            ))),
            AgreementPolicy::Distribution(w) if WeightedIndex::new(w).is_err() => {
                Err(SimError::Profile(
                    "agreement weights must be non-negative with a positive sum".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SimLearnerProfile {
        let true_theta = if self.theta_sd > 0.0 {
            Normal::new(self.theta_mean, self.theta_sd)
                .expect("validated sd")
                .sample(rng)
        } else {
            self.theta_mean
        };
        SimLearnerProfile {
            true_theta,
            slip: self.slip,
            guess: self.guess,
            policy: self.policy,
            agreement: self.agreement,
            skip_prob: self.skip_prob,
            run_prob: self.run_prob,
            empty_prob: self.empty_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub modes: Vec<Mode>,
    pub learners_per_mode: usize,
    pub steps: usize,
    pub seed: u64,
    pub profile: SimProfile,
    /// Defaults to the first language that has exercises.
    pub language: Option<String>,
    pub engine: EngineConfig,
}

impl SimConfig {
    pub fn new(modes: Vec<Mode>, learners_per_mode: usize, steps: usize, seed: u64) -> Self {
        Self {
            modes,
            learners_per_mode,
            steps,
            seed,
            profile: SimProfile::default(),
            language: None,
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("graph has no language with exercises")]
    NoLanguage,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
}

pub struct SimOutput {
    pub events: Vec<EventRecord>,
    pub state: EngineState,
    pub llm_calls: usize,
    pub profiles: Vec<(String, SimLearnerProfile)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    DropLastLine,
    FlipComparison,
    DeleteElse,
}

/// Removes the last non-blank line.
fn drop_last_line(code: &str) -> Option<String> {
    let mut lines: Vec<&str> = code.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines.pop()?;
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    Some(out)
}

/// Byte offsets and lengths of comparison operators.
fn comparison_sites(code: &str) -> Vec<(usize, &'static str)> {
    let bytes = code.as_bytes();
    let mut sites = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let two = &code[i..(i + 2).min(code.len())];
        let op: Option<&'static str> = match two {
            "==" => Some("=="),
            "!=" => Some("!="),
            "<=" => Some("<="),
            ">=" => Some(">="),
            _ => match bytes[i] {
                b'<' if i == 0 || bytes[i - 1] != b'<' && bytes.get(i + 1) != Some(&b'<') => {
                    Some("<")
                }
                b'>' if i == 0
                    || bytes[i - 1] != b'-'
                        && bytes[i - 1] != b'>'
                        && bytes.get(i + 1) != Some(&b'>') =>
                {
                    Some(">")
                }
                _ => None,
            },
        };
        match op {
            Some(op) => {
                sites.push((i, op));
                i += op.len();
            }
            None => i += 1,
        }
    }
    sites
}

fn flipped(op: &str) -> &'static str {
    match op {
        "==" => "!=",
        "!=" => "==",
        "<=" => ">",
        ">" => "<=",
        ">=" => "<",
        _ => ">=",
    }
}

fn flip_comparison(code: &str, rng: &mut impl Rng) -> Option<String> {
    let sites = comparison_sites(code);
    if sites.is_empty() {
        return None;
    }
    let (at, op) = sites[rng.random_range(0..sites.len())];
    Some(format!(
        "{}{}{}",
        &code[..at],
        flipped(op),
        &code[at + op.len()..]
    ))
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Deletes an `else` line together with the block indented under it.
fn delete_else(code: &str, rng: &mut impl Rng) -> Option<String> {
    let lines: Vec<&str> = code.lines().collect();
    let is_else = |l: &str| {
        let t = l.trim_start();
        t.strip_prefix("else")
            .is_some_and(|rest| !rest.starts_with(|c: char| c.is_alphanumeric() || c == '_'))
    };
    let sites: Vec<usize> = (0..lines.len()).filter(|&i| is_else(lines[i])).collect();
    if sites.is_empty() {
        return None;
    }
    let at = sites[rng.random_range(0..sites.len())];
    let base = indent_of(lines[at]);
    let mut end = at + 1;
    while end < lines.len() && (lines[end].trim().is_empty() || indent_of(lines[end]) > base) {
        end += 1;
    }
    let kept: Vec<&str> = lines[..at].iter().chain(&lines[end..]).copied().collect();
    let mut out = kept.join("\n");
    if code.ends_with('\n') && !out.is_empty() {
        out.push('\n');
    }
    Some(out)
}

pub fn apply_mutation(code: &str, mutation: Mutation, rng: &mut impl Rng) -> Option<String> {
    match mutation {
        Mutation::DropLastLine => drop_last_line(code),
        Mutation::FlipComparison => flip_comparison(code, rng),
        Mutation::DeleteElse => delete_else(code, rng),
    }
}

/// Appends an output line no test expects.
fn append_wrong_line(exercise: &Exercise, code: &str) -> String {
    let line = if exercise.language_id == IDENTITY_LANGUAGE {
        "__wrong__".to_string()
    } else {
        "print(\"__wrong__\")".to_string()
    };
    let sep = if code.is_empty() || code.ends_with('\n') {
        ""
    } else {
        "\n"
    };
    format!("{code}{sep}{line}\n")
}

/// A variant of the reference solution that fails at least one test case.
pub fn mutate_solution(
    exercise: &Exercise,
    rng: &mut impl Rng,
    runner: &dyn CodeRunner,
) -> Result<String, RunnerError> {
    const OPS: [Mutation; 3] = [
        Mutation::DropLastLine,
        Mutation::FlipComparison,
        Mutation::DeleteElse,
    ];
    let reference = &exercise.reference_solution;
    for _ in 0..5 {
        let op = OPS[rng.random_range(0..OPS.len())];
        let Some(candidate) = apply_mutation(reference, op, rng) else {
            continue;
        };
        if candidate != *reference
            && run_tests(exercise, &candidate, runner)?
                .iter()
                .any(|r| !r.passed)
        {
            return Ok(candidate);
        }
    }
    Ok(append_wrong_line(exercise, reference))
}

fn pick_language(kg: &KnowledgeGraph, wanted: Option<&str>) -> Result<String, SimError> {
    if let Some(l) = wanted {
        return Ok(l.to_string());
    }
    kg.languages()
        .into_iter()
        .find(|l| kg.exercises().iter().any(|e| e.language_id == *l))
        .map(str::to_string)
        .ok_or(SimError::NoLanguage)
}

fn first_concept(kg: &KnowledgeGraph, language: &str) -> Result<String, SimError> {
    kg.concepts_for_language(language)
        .into_iter()
        .filter(|c| kg.concept_exercises(&c.id).next().is_some())
        .min_by(|a, b| a.order_index.cmp(&b.order_index).then(a.id.cmp(&b.id)))
        .map(|c| c.id.clone())
        .ok_or(SimError::NoLanguage)
}

fn choose(policy: DecisionPolicy, offered: &[Choice], rng: &mut impl Rng) -> Choice {
    let genai = offered.iter().copied().find(|c| c.is_genai());
    let adaptive = offered
        .iter()
        .copied()
        .find(|c| *c == Choice::UseAdaptive)
        .or_else(|| offered.iter().copied().find(|c| !c.is_genai()));
    let follow_genai = match policy {
        DecisionPolicy::AlwaysAcceptGenai => true,
        DecisionPolicy::AlwaysUseAdaptive => false,
        DecisionPolicy::CoinFlip(p) => rng.random_bool(p),
    };
    let pick = if follow_genai {
        genai.or(adaptive)
    } else {
        adaptive.or(genai)
    };
    pick.unwrap_or(offered[0])
}

fn rating(policy: AgreementPolicy, rng: &mut impl Rng) -> i64 {
    match policy {
        AgreementPolicy::Fixed(r) => i64::from(r),
        AgreementPolicy::Distribution(w) => {
            WeightedIndex::new(w)
                .expect("validated weights")
                .sample(rng) as i64
                + 1
        }
    }
}

struct SimLearner {
    id: String,
    profile: SimLearnerProfile,
    done: bool,
}

/// Runs a cohort through the engine against the reference mock model.
pub fn simulate(
    kg: KnowledgeGraph,
    runner: Arc<dyn CodeRunner>,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    cfg.profile.validate()?;
    let language = pick_language(&kg, cfg.language.as_deref())?;
    let start_concept = first_concept(&kg, &language)?;
    let shared = shared_graph(kg);
    let sink = Arc::new(MemorySink::default());
    let llm = Arc::new(CountingLlm::new(ReferenceLlm::new(
        shared.clone(),
        runner.clone(),
    )));
    let engine = Engine::new(
        EngineParts {
            kg: shared,
            runner: runner.clone(),
            llm: llm.clone(),
            embedder: Arc::new(HashEmbedder),
            memory: Arc::new(InMemoryStore::default()),
            clock: Arc::new(StepClock::new(SIM_EPOCH_MS, 1_000)),
            sink: sink.clone(),
        },
        cfg.engine.clone(),
    )?;
    let mut rng = SplitMix64::seed_from_u64(cfg.seed);

    let mut learners = Vec::new();
    for mode in &cfg.modes {
        for i in 0..cfg.learners_per_mode {
            let id = format!("{mode}-{i:03}");
            let profile = cfg.profile.sample(&mut rng);
            engine.login(&id, *mode)?;
            engine.start_concept(&id, &language, &start_concept)?;
            learners.push(SimLearner {
                id,
                profile,
                done: false,
            });
        }
    }

    let kg = engine.graph();
    for _ in 0..cfg.steps {
        for learner in learners.iter_mut().filter(|l| !l.done) {
            step(&engine, &kg, runner.as_ref(), learner, &language, &mut rng)?;
        }
    }

    Ok(SimOutput {
        events: sink.records(),
        state: engine.state(),
        llm_calls: llm.calls(),
        profiles: learners.into_iter().map(|l| (l.id, l.profile)).collect(),
    })
}

fn attempt(
    ex: &Exercise,
    profile: &SimLearnerProfile,
    runner: &dyn CodeRunner,
    rng: &mut impl Rng,
) -> Result<String, RunnerError> {
    if rng.random_bool(profile.empty_prob) {
        return Ok(String::new());
    }
    if rng.random_bool(profile.success_probability(ex.initial_difficulty())) {
        Ok(ex.reference_solution.clone())
    } else {
        mutate_solution(ex, rng, runner)
    }
}

fn step(
    engine: &Engine,
    kg: &KnowledgeGraph,
    runner: &dyn CodeRunner,
    learner: &mut SimLearner,
    language: &str,
    rng: &mut impl Rng,
) -> Result<(), SimError> {
    let view = engine.view(&learner.id)?;
    let p = learner.profile;
    match view.phase {
        Phase::NeedsPretest => {
            let mut codes = Vec::new();
            for item in &view.pretest_items {
                let ex = kg
                    .exercise(item)
                    .expect("pretest items come from the graph");
                codes.push(attempt(ex, &p, runner, rng)?);
            }
            engine.submit_pretest(&learner.id, &codes)?;
        }
        Phase::InExercise => {
            let id = view
                .current_exercise
                .expect("in-exercise phase has an exercise");
            let ex = kg
                .exercise(&id)
                .expect("assigned exercises come from the graph");
            let roll: f64 = rng.random();
            if roll < p.skip_prob {
                engine.request_other_exercise(&learner.id)?;
            } else if roll < p.skip_prob + p.run_prob {
                let code = attempt(ex, &p, runner, rng)?;
                engine.run(&learner.id, &code)?;
            } else {
                let code = attempt(ex, &p, runner, rng)?;
                engine.submit(&learner.id, &code)?;
            }
        }
        Phase::AwaitingAgreement => {
            engine.record_agreement(&learner.id, rating(p.agreement, rng))?;
        }
        Phase::AwaitingRecommendationDecision | Phase::AwaitingRepeatDecision => {
            let offered = view.pending.map(|x| x.offered).unwrap_or_default();
            let choice = choose(p.policy, &offered, rng);
            engine.resolve_recommendation(&learner.id, choice)?;
        }
        Phase::ConceptComplete => match view.next_concept {
            Some(next) => {
                engine.start_concept(&learner.id, language, &next)?;
            }
            None => learner.done = true,
        },
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub true_theta: f64,
    pub steps: usize,
    /// Item difficulties are spread evenly over [-span, span].
    pub items: usize,
    pub span: f64,
    pub start_theta: f64,
    /// When false the item bank is treated as calibrated and only the
    /// learner's rating moves.
    pub update_items: bool,
    pub params: EloParams,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            true_theta: 1.0,
            steps: 300,
            items: 41,
            span: 3.0,
            start_theta: 0.0,
            update_items: false,
            params: EloParams::default(),
        }
    }
}

/// Ability estimate after `steps` adaptive attempts by a learner whose
/// outcomes follow the logistic model exactly. Item ratings start at their
/// true difficulty.
pub fn theta_recovery(seed: u64, cfg: &RecoveryConfig) -> f64 {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = cfg.items.max(2);
    let truth: Vec<f64> = (0..n)
        .map(|i| -cfg.span + 2.0 * cfg.span * i as f64 / (n - 1) as f64)
        .collect();
    let mut items: Vec<DifficultyRating> =
        truth.iter().map(|&d| DifficultyRating::new(d)).collect();
    let mut skill = SkillState::new(cfg.start_theta);
    for _ in 0..cfg.steps {
        let pick = (0..n)
            .min_by(|&a, &b| {
                (items[a].d - skill.theta)
                    .abs()
                    .total_cmp(&(items[b].d - skill.theta).abs())
                    .then(items[a].attempts.cmp(&items[b].attempts))
                    .then(a.cmp(&b))
            })
            .expect("at least two items");
        let correct = rng.random_bool(expected_success(cfg.true_theta, truth[pick]));
        let (s, d) = update_ratings(skill, items[pick], correct, &cfg.params);
        skill = s;
        if cfg.update_items {
            items[pick] = d;
        } else {
            items[pick].attempts = d.attempts;
        }
    }
    skill.theta
}
