//! Elo-style learner/item rating, placement and closest-difficulty selection.
//!
//! Ability and difficulty share a logit scale. The expected probability of a
//! correct answer is logistic in their difference and both sides move by an
//! uncertainty factor that shrinks with the number of recorded attempts.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Exercise, KnowledgeGraph, Level};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EloParams {
    /// Uncertainty numerator.
    pub a: f64,
    /// Uncertainty decay per attempt.
    pub b: f64,
    pub theta_master: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for EloParams {
    fn default() -> Self {
        Self {
            a: 0.8,
            b: 0.05,
            theta_master: 1.5,
            band_lo: -0.5,
            band_hi: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EloError {
    #[error("invalid elo parameters: {0}")]
    InvalidParams(String),
    #[error("pre-test needs exactly 3 results, got {0}")]
    PretestArity(usize),
    #[error("concept {0:?} has no exercises")]
    NoExercises(String),
}

impl EloParams {
    pub fn validate(&self) -> Result<(), EloError> {
        let finite = [
            self.a,
            self.b,
            self.theta_master,
            self.band_lo,
            self.band_hi,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(EloError::InvalidParams("values must be finite".into()));
        }
        if self.a <= 0.0 {
            return Err(EloError::InvalidParams(format!(
                "a must be > 0, got {}",
                self.a
            )));
        }
        if self.b < 0.0 {
            return Err(EloError::InvalidParams(format!(
                "b must be >= 0, got {}",
                self.b
            )));
        }
        if !(self.band_lo < self.band_hi && self.band_hi < self.theta_master) {
            return Err(EloError::InvalidParams(format!(
                "need band_lo < band_hi < theta_master, got {} / {} / {}",
                self.band_lo, self.band_hi, self.theta_master
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillState {
    pub theta: f64,
    pub attempts: u32,
}

impl SkillState {
    pub fn new(theta: f64) -> Self {
        Self { theta, attempts: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRating {
    pub d: f64,
    pub attempts: u32,
}

impl DifficultyRating {
    pub fn new(d: f64) -> Self {
        Self { d, attempts: 0 }
    }

    pub fn seeded(exercise: &Exercise) -> Self {
        Self::new(exercise.initial_difficulty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub initial_theta: f64,
    pub initial_level: Level,
    pub already_mastered: bool,
}

pub fn expected_success(theta: f64, d: f64) -> f64 {
    1.0 / (1.0 + (-(theta - d)).exp())
}

pub fn uncertainty_k(attempts: u32, params: &EloParams) -> f64 {
    params.a / (1.0 + params.b * f64::from(attempts))
}

/// Increments to ability and difficulty for one scored attempt.
pub fn rating_deltas(
    skill: &SkillState,
    item: &DifficultyRating,
    correct: bool,
    params: &EloParams,
) -> (f64, f64) {
    let outcome = if correct { 1.0 } else { 0.0 };
    let p = expected_success(skill.theta, item.d);
    (
        uncertainty_k(skill.attempts, params) * (outcome - p),
        uncertainty_k(item.attempts, params) * (p - outcome),
    )
}

/// Applies one scored attempt. `correct` means every test case passed.
pub fn update_ratings(
    skill: SkillState,
    item: DifficultyRating,
    correct: bool,
    params: &EloParams,
) -> (SkillState, DifficultyRating) {
    let (skill_delta, item_delta) = rating_deltas(&skill, &item, correct, params);
    (
        SkillState {
            theta: skill.theta + skill_delta,
            attempts: skill.attempts + 1,
        },
        DifficultyRating {
            d: item.d + item_delta,
            attempts: item.attempts + 1,
        },
    )
}

/// Bounds of a level band. The open-ended Easy band is given the same width
/// as the Standard band; the Difficult band ends at the mastery threshold.
fn band_bounds(level: Level, params: &EloParams) -> (f64, f64) {
    match level {
        Level::Easy => (
            params.band_lo - (params.band_hi - params.band_lo),
            params.band_lo,
        ),
        Level::Standard => (params.band_lo, params.band_hi),
        Level::Difficult => (params.band_hi, params.theta_master),
    }
}

fn band_midpoint(level: Level, params: &EloParams) -> f64 {
    let (lo, hi) = band_bounds(level, params);
    (lo + hi) / 2.0
}

/// Placement from pre-test results ordered Easy, Standard, Difficult.
/// The first failed item decides the level.
pub fn place_from_pretest(results: &[bool], params: &EloParams) -> Result<Placement, EloError> {
    if results.len() != 3 {
        return Err(EloError::PretestArity(results.len()));
    }
    Ok(match results.iter().position(|passed| !passed) {
        Some(i) => {
            let level = Level::ALL[i];
            Placement {
                initial_theta: band_midpoint(level, params),
                initial_level: level,
                already_mastered: false,
            }
        }
        None => Placement {
            initial_theta: 1.2,
            initial_level: Level::Difficult,
            already_mastered: false,
        },
    })
}

pub fn level_of(theta: f64, params: &EloParams) -> Level {
    if theta < params.band_lo {
        Level::Easy
    } else if theta < params.band_hi {
        Level::Standard
    } else {
        Level::Difficult
    }
}

/// Position within the current band, for the progress bar.
pub fn progress_fraction(theta: f64, params: &EloParams) -> f64 {
    let (lo, hi) = band_bounds(level_of(theta, params), params);
    ((theta - lo) / (hi - lo)).clamp(0.0, 1.0)
}

pub fn mastery_reached(theta: f64, params: &EloParams) -> bool {
    theta >= params.theta_master
}

/// Live item ratings. Exercises never attempted use their seed difficulty.
pub trait RatingLookup {
    fn rating_of(&self, exercise: &Exercise) -> DifficultyRating;
}

impl RatingLookup for HashMap<String, DifficultyRating> {
    fn rating_of(&self, exercise: &Exercise) -> DifficultyRating {
        self.get(&exercise.id)
            .copied()
            .unwrap_or_else(|| DifficultyRating::seeded(exercise))
    }
}

impl RatingLookup for BTreeMap<String, DifficultyRating> {
    fn rating_of(&self, exercise: &Exercise) -> DifficultyRating {
        self.get(&exercise.id)
            .copied()
            .unwrap_or_else(|| DifficultyRating::seeded(exercise))
    }
}

/// Seed ratings only.
pub struct SeedRatings;

impl RatingLookup for SeedRatings {
    fn rating_of(&self, exercise: &Exercise) -> DifficultyRating {
        DifficultyRating::seeded(exercise)
    }
}

/// Constraints for [`select_next_exercise`].
#[derive(Debug, Default, Clone)]
pub struct Selection<'a> {
    pub solved: Option<&'a HashSet<String>>,
    /// Hard exclusions, e.g. the current exercise or a declined candidate.
    pub exclude: Vec<&'a str>,
    /// Restrict to one level when it has any candidate.
    pub level: Option<Level>,
}

/// Picks the exercise whose difficulty is closest to `theta`.
///
/// Ties go to the item with fewer attempts, then to the smaller id. Solved
/// exercises are skipped unless nothing else is left, in which case
/// re-practice is allowed.
pub fn select_next_exercise<'g>(
    kg: &'g KnowledgeGraph,
    language_id: &str,
    concept_id: &str,
    skill: &SkillState,
    ratings: &dyn RatingLookup,
    selection: &Selection<'_>,
) -> Result<&'g Exercise, EloError> {
    let all: Vec<&Exercise> = kg
        .concept_exercises(concept_id)
        .filter(|e| e.language_id == language_id)
        .collect();
    if all.is_empty() {
        return Err(EloError::NoExercises(concept_id.to_string()));
    }
    let level_pool: Vec<&Exercise> = match selection.level {
        Some(level) if all.iter().any(|e| e.level == level) => {
            all.iter().copied().filter(|e| e.level == level).collect()
        }
        _ => all.clone(),
    };
    let is_excluded = |e: &Exercise| selection.exclude.contains(&e.id.as_str());
    let is_solved = |e: &Exercise| selection.solved.is_some_and(|s| s.contains(&e.id));

    let tiers: [&dyn Fn(&Exercise) -> bool; 3] = [
        &|e| !is_excluded(e) && !is_solved(e),
        &|e| !is_excluded(e),
        &|_| true,
    ];
    for keep in tiers {
        if let Some(best) = closest(
            level_pool.iter().copied().filter(|e| keep(e)),
            skill.theta,
            ratings,
        ) {
            return Ok(best);
        }
    }
    unreachable!("non-empty pool always yields a candidate")
}

fn closest<'g>(
    candidates: impl Iterator<Item = &'g Exercise>,
    theta: f64,
    ratings: &dyn RatingLookup,
) -> Option<&'g Exercise> {
    candidates
        .map(|e| {
            let r = ratings.rating_of(e);
            ((r.d - theta).abs(), r.attempts, e)
        })
        .min_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then_with(|| a.2.id.cmp(&b.2.id))
        })
        .map(|(_, _, e)| e)
}
