//! Learning-log analytics: per-learner features, group comparisons and
//! questionnaire statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::Classification;
use crate::events::{Choice, Event, EventRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("all groups have zero variance but different means")]
    ZeroWithinVariance,
    #[error("person totals have zero variance")]
    ZeroTotalVariance,
    #[error("rows have different lengths")]
    Ragged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFeatureVector {
    pub learner: String,
    pub n_submissions: u64,
    pub n_correct: u64,
    pub n_wrong: u64,
    pub n_missing: u64,
    pub p_correct: f64,
    pub p_wrong: f64,
    pub p_missing: f64,
    pub skip_count: u64,
    pub skip_rate: f64,
    /// No submissions: the proportions carry no information.
    pub low_data: bool,
}

/// The four log features of one learner.
pub fn compute_log_features(events: &[EventRecord], learner: &str) -> LogFeatureVector {
    let (mut correct, mut wrong, mut missing, mut skips) = (0u64, 0u64, 0u64, 0u64);
    for e in events.iter().filter(|e| e.learner == learner) {
        match &e.event {
            Event::Submission { classification, .. } => match classification {
                Classification::Correct => correct += 1,
                Classification::Wrong => wrong += 1,
                Classification::MissingLogic => missing += 1,
            },
            Event::Skip { .. } => skips += 1,
            _ => {}
        }
    }
    let n = correct + wrong + missing;
    let share = |c: u64| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    LogFeatureVector {
        learner: learner.to_string(),
        n_submissions: n,
        n_correct: correct,
        n_wrong: wrong,
        n_missing: missing,
        p_correct: share(correct),
        p_wrong: share(wrong),
        p_missing: share(missing),
        skip_count: skips,
        skip_rate: if skips + n == 0 {
            0.0
        } else {
            skips as f64 / (skips + n) as f64
        },
        low_data: n == 0,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n − 1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn group_stats(group: &str, values: &[f64]) -> Result<GroupStats, StatsError> {
    if values.is_empty() {
        return Err(StatsError::InsufficientData {
            what: "values",
            needed: 1,
            got: 0,
        });
    }
    Ok(GroupStats {
        group: group.to_string(),
        n: values.len(),
        mean: mean(values),
        sd: sample_variance(values).sqrt(),
    })
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(F > f) for the F distribution with (df1, df2) degrees of freedom.
pub fn f_upper_tail(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
}

/// Two-sided P(|T| > |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    pub p: f64,
    pub eta_squared: f64,
    pub note: Option<String>,
}

pub fn eta_squared_from_f(f: f64, df1: f64, df2: f64) -> f64 {
    f * df1 / (f * df1 + df2)
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::InsufficientData {
            what: "groups",
            needed: 2,
            got: groups.len(),
        });
    }
    if let Some(small) = groups.iter().find(|g| g.len() < 2) {
        return Err(StatsError::InsufficientData {
            what: "observations per group",
            needed: 2,
            got: small.len(),
        });
    }
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let ss_between: f64 = groups
        .iter()
        .map(|g| g.len() as f64 * (mean(g) - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let (df1, df2) = (k - 1, n - k);
    if ss_within == 0.0 {
        if ss_between == 0.0 {
            return Ok(AnovaResult {
                f: 0.0,
                df1,
                df2,
                p: 1.0,
                eta_squared: 0.0,
                note: Some("all observations identical; F defined as 0".into()),
            });
        }
        return Err(StatsError::ZeroWithinVariance);
    }
    let f = (ss_between / df1 as f64) / (ss_within / df2 as f64);
    Ok(AnovaResult {
        f,
        df1,
        df2,
        p: f_upper_tail(f, df1 as f64, df2 as f64),
        eta_squared: eta_squared_from_f(f, df1 as f64, df2 as f64),
        note: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDiff {
    pub a: String,
    pub b: String,
    /// mean(a) − mean(b).
    pub delta: f64,
    pub abs_delta: f64,
    /// Which group has the larger mean.
    pub direction: String,
}

pub fn pairwise_mean_diff(a_label: &str, a: &[f64], b_label: &str, b: &[f64]) -> MeanDiff {
    let delta = mean(a) - mean(b);
    let direction = if delta > 0.0 {
        format!("{a_label} > {b_label}")
    } else if delta < 0.0 {
        format!("{a_label} < {b_label}")
    } else {
        format!("{a_label} = {b_label}")
    };
    MeanDiff {
        a: a_label.to_string(),
        b: b_label.to_string(),
        delta,
        abs_delta: delta.abs(),
        direction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Student's pooled-variance t, or Welch's t when `pooled` is false.
pub fn two_sample_t(a: &[f64], b: &[f64], pooled: bool) -> Result<TTest, StatsError> {
    let short = a.len().min(b.len());
    if short < 2 {
        return Err(StatsError::InsufficientData {
            what: "observations per sample",
            needed: 2,
            got: short,
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let diff = mean(a) - mean(b);
    let (se, df) = if pooled {
        let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        ((sp2 * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
    } else {
        let (qa, qb) = (va / na, vb / nb);
        let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
        ((qa + qb).sqrt(), df)
    };
    let t = if diff == 0.0 { 0.0 } else { diff / se };
    let p = if t == 0.0 { 1.0 } else { t_two_sided(t, df) };
    Ok(TTest { t, df, p })
}

/// Cronbach's α over a persons × items matrix.
pub fn cronbach_alpha(matrix: &[Vec<f64>]) -> Result<f64, StatsError> {
    if matrix.len() < 2 {
        return Err(StatsError::InsufficientData {
            what: "persons",
            needed: 2,
            got: matrix.len(),
        });
    }
    let k = matrix[0].len();
    if matrix.iter().any(|r| r.len() != k) {
        return Err(StatsError::Ragged);
    }
    if k < 2 {
        return Err(StatsError::InsufficientData {
            what: "items",
            needed: 2,
            got: k,
        });
    }
    let item_var: f64 = (0..k)
        .map(|j| sample_variance(&matrix.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .sum();
    let totals: Vec<f64> = matrix.iter().map(|r| r.iter().sum()).collect();
    let total_var = sample_variance(&totals);
    if total_var == 0.0 {
        return Err(StatsError::ZeroTotalVariance);
    }
    let k = k as f64;
    Ok(k / (k - 1.0) * (1.0 - item_var / total_var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Counts for ratings 1..=5.
    pub counts: [u64; 5],
    /// Ratings the learner chose not to give.
    pub skipped: u64,
}

/// Summary of 1..=5 ratings; 0 marks a skipped rating and is excluded.
pub fn likert_summary(ratings: &[u8]) -> LikertSummary {
    let mut counts = [0u64; 5];
    let mut skipped = 0;
    let mut values = Vec::new();
    for &r in ratings {
        match r {
            1..=5 => {
                counts[(r - 1) as usize] += 1;
                values.push(f64::from(r));
            }
            _ => skipped += 1,
        }
    }
    LikertSummary {
        n: values.len(),
        mean: (!values.is_empty()).then(|| mean(&values)),
        sd: (!values.is_empty()).then(|| sample_variance(&values).sqrt()),
        counts,
        skipped,
    }
}

pub fn agreement_ratings<'a>(events: impl IntoIterator<Item = &'a EventRecord>) -> Vec<u8> {
    events
        .into_iter()
        .filter_map(|e| match e.event {
            Event::Agreement { rating, .. } => Some(rating),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRefusal {
    pub genai_recommendations: u64,
    pub repeated: u64,
    /// None when no GenAI recommendation was shown.
    pub repeat_rate: Option<f64>,
    pub genai_decisions: u64,
    pub refusals: u64,
    /// None when no decision offered a GenAI option.
    pub refusal_rate: Option<f64>,
}

/// Share of repeated GenAI recommendations, and share of decisions that
/// turned a GenAI option down.
pub fn repeat_and_refusal_rates<'a>(
    events: impl IntoIterator<Item = &'a EventRecord>,
) -> RepeatRefusal {
    let (mut recs, mut repeated, mut decisions, mut refusals) = (0, 0, 0, 0);
    for e in events {
        match &e.event {
            Event::RecommendationShown {
                genai_candidate: Some(_),
                repeated: r,
                ..
            } => {
                recs += 1;
                if *r {
                    repeated += 1;
                }
            }
            Event::RecommendationDecision {
                offered, chosen, ..
            } if offered.iter().any(|c| c.is_genai()) => {
                decisions += 1;
                if matches!(chosen, Choice::UseAdaptive | Choice::DeclineAdaptive) {
                    refusals += 1;
                }
            }
            _ => {}
        }
    }
    let rate = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    RepeatRefusal {
        genai_recommendations: recs,
        repeated,
        repeat_rate: rate(repeated, recs),
        genai_decisions: decisions,
        refusals,
        refusal_rate: rate(refusals, decisions),
    }
}

/// Learner → group label, taken from the mode each learner used.
pub fn groups_from_modes(events: &[EventRecord]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in events {
        if let Event::Login { mode } | Event::ConceptStart { mode, .. } = &e.event {
            out.entry(e.learner.clone())
                .or_insert_with(|| mode.to_string());
        }
    }
    out
}

pub const FEATURES: [&str; 4] = ["p_correct", "p_wrong", "p_missing", "skip_rate"];

fn feature_value(f: &LogFeatureVector, name: &str) -> f64 {
    match name {
        "p_correct" => f.p_correct,
        "p_wrong" => f.p_wrong,
        "p_missing" => f.p_missing,
        _ => f.skip_rate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: String,
    pub groups: Vec<GroupStats>,
    pub anova: Option<AnovaResult>,
    /// Why the ANOVA is missing, if it is.
    pub anova_note: Option<String>,
    pub pairwise: Vec<MeanDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub learners: usize,
    pub rates: RepeatRefusal,
    pub agreement: LikertSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub events: usize,
    pub learners: Vec<LogFeatureVector>,
    pub group_of: BTreeMap<String, String>,
    pub features: Vec<FeatureRow>,
    pub groups: Vec<GroupSummary>,
    pub notes: Vec<String>,
}

/// Builds the analytics document. Learners without a group are left out
/// of group statistics.
pub fn report(events: &[EventRecord], group_of: &BTreeMap<String, String>) -> Report {
    let learners: BTreeSet<&str> = events.iter().map(|e| e.learner.as_str()).collect();
    let features: Vec<LogFeatureVector> = learners
        .iter()
        .map(|l| compute_log_features(events, l))
        .collect();
    let group_names: BTreeSet<&str> = features
        .iter()
        .filter_map(|f| group_of.get(&f.learner).map(String::as_str))
        .collect();
    let members = |g: &str| -> Vec<&LogFeatureVector> {
        features
            .iter()
            .filter(|f| group_of.get(&f.learner).map(String::as_str) == Some(g))
            .collect()
    };

    let mut rows = Vec::new();
    for name in FEATURES {
        let samples: Vec<(&str, Vec<f64>)> = group_names
            .iter()
            .map(|g| {
                (
                    *g,
                    members(g).iter().map(|f| feature_value(f, name)).collect(),
                )
            })
            .collect();
        let groups = samples
            .iter()
            .filter_map(|(g, v)| group_stats(g, v).ok())
            .collect();
        let data: Vec<Vec<f64>> = samples.iter().map(|(_, v)| v.clone()).collect();
        let (anova, anova_note) = match one_way_anova(&data) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let mut pairwise = Vec::new();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let (ga, a) = &samples[i];
                let (gb, b) = &samples[j];
                pairwise.push(pairwise_mean_diff(ga, a, gb, b));
            }
        }
        rows.push(FeatureRow {
            feature: name.to_string(),
            groups,
            anova,
            anova_note,
            pairwise,
        });
    }

    let groups = group_names
        .iter()
        .map(|g| {
            let in_group =
                |e: &&EventRecord| group_of.get(&e.learner).map(String::as_str) == Some(*g);
            GroupSummary {
                group: g.to_string(),
                learners: members(g).len(),
                rates: repeat_and_refusal_rates(events.iter().filter(in_group)),
                agreement: likert_summary(&agreement_ratings(events.iter().filter(in_group))),
            }
        })
        .collect();

    Report {
        events: events.len(),
        learners: features,
        group_of: group_of.clone(),
        features: rows,
        groups,
        notes: vec!["pairwise comparisons report mean differences only, without p-values".into()],
    }
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Plain-text tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "events: {}  learners: {}",
            self.events,
            self.learners.len()
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>4} {:>8} {:>8}",
            "feature", "group", "n", "mean", "sd"
        );
        for row in &self.features {
            for g in &row.groups {
                let _ = writeln!(
                    out,
                    "{:<10} {:<10} {:>4} {:>8.4} {:>8.4}",
                    row.feature, g.group, g.n, g.mean, g.sd
                );
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>8} {:>10} {:>8}",
            "feature", "df", "F", "p", "eta^2"
        );
        for row in &self.features {
            match &row.anova {
                Some(a) => {
                    let _ = writeln!(
                        out,
                        "{:<10} {:>10} {:>8.3} {:>10.4} {:>8.3}",
                        row.feature,
                        format!("({},{})", a.df1, a.df2),
                        a.f,
                        a.p,
                        a.eta_squared
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<10} {}",
                        row.feature,
                        row.anova_note.as_deref().unwrap_or("not computed")
                    );
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "group", "repeat", "refusal", "agree", "sd", "n"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>8} {:>8} {:>8} {:>6}",
                g.group,
                fmt_opt(g.rates.repeat_rate, 4),
                fmt_opt(g.rates.refusal_rate, 4),
                fmt_opt(g.agreement.mean, 3),
                fmt_opt(g.agreement.sd, 3),
                g.agreement.n
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Mode, Phase};

    fn rec(learner: &str, ts: i64, event: Event) -> EventRecord {
        EventRecord {
            ts,
            learner: learner.into(),
            session: format!("{learner}:identity:c"),
            event,
        }
    }

    fn submission(c: Classification) -> Event {
        Event::Submission {
            exercise: "e".into(),
            classification: c,
            all_passed: c == Classification::Correct,
            first_attempt: false,
            rating: None,
        }
    }

    #[test]
    fn features_from_counts() {
        let mut events = Vec::new();
        let mix = [6, 3, 1];
        let kinds = [
            Classification::Correct,
            Classification::Wrong,
            Classification::MissingLogic,
        ];
        for (n, k) in mix.iter().zip(kinds) {
            for _ in 0..*n {
                events.push(rec("a", events.len() as i64, submission(k)));
            }
        }
        let f = compute_log_features(&events, "a");
        assert_eq!((f.p_correct, f.p_wrong, f.p_missing), (0.6, 0.3, 0.1));
        assert_eq!(f.skip_rate, 0.0);

        let skips = vec![
            rec(
                "b",
                1,
                Event::Skip {
                    exercise: "x".into(),
                },
            ),
            rec(
                "b",
                2,
                Event::Skip {
                    exercise: "y".into(),
                },
            ),
        ];
        let f = compute_log_features(&skips, "b");
        assert_eq!((f.p_correct, f.p_wrong, f.p_missing), (0.0, 0.0, 0.0));
        assert_eq!(f.skip_rate, 1.0);
        assert!(f.low_data);
    }

    #[test]
    fn anova_small_example() {
        let r = one_way_anova(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 3.0, 4.0],
            vec![3.0, 4.0, 5.0],
        ])
        .unwrap();
        assert!((r.f - 3.0).abs() < 1e-12);
        assert_eq!((r.df1, r.df2), (2, 6));
        // P(F(2,6) > 3) = (1 + 3*2/6)^(-3) = 1/8 in closed form for df1 = 2
        assert!((r.p - 0.125).abs() < 1e-12);
        assert!((r.eta_squared - 0.5).abs() < 1e-12);
    }

    #[test]
    fn anova_identical_and_degenerate() {
        let same = one_way_anova(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(same.f, 0.0);
        assert!(same.note.is_some());
        assert_eq!(
            one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]),
            Err(StatsError::ZeroWithinVariance)
        );
        assert!(one_way_anova(&[vec![1.0, 2.0]]).is_err());
        assert!(one_way_anova(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        let g = vec![1.0, 2.0, 5.0];
        let r = one_way_anova(&[g.clone(), g.clone(), g]).unwrap();
        assert_eq!(r.f, 0.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, b) = 1 - (1-x)^b and I_x(a, 1) = x^a
        for &x in &[0.01, 0.2, 0.5, 0.77, 0.99] {
            assert!(
                (regularized_incomplete_beta(1.0, 3.5, x) - (1.0 - (1.0 - x).powf(3.5))).abs()
                    < 1e-13
            );
            assert!((regularized_incomplete_beta(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-13);
            let sym = regularized_incomplete_beta(3.0, 7.0, x)
                + regularized_incomplete_beta(7.0, 3.0, 1.0 - x);
            assert!((sym - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn t_test_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let t = two_sample_t(&a, &a, true).unwrap();
        assert_eq!(t.t, 0.0);
        assert_eq!(t.df, 6.0);
        let b = [2.0, 3.0, 4.0, 6.0];
        let t = two_sample_t(&a, &b, true).unwrap();
        // brute force: pooled var = (5/3 + 35/12)/2, se = sqrt(sp2 * 0.5)
        let sp2: f64 = (5.0 / 3.0 + 35.0 / 12.0) / 2.0;
        assert!((t.t - (-1.25 / (sp2 * 0.5).sqrt())).abs() < 1e-12);
        assert!(two_sample_t(&[1.0], &b, true).is_err());
        // t with 1 df is Cauchy: P(|T| > 1) = 1/2
        assert!((t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cronbach_alpha_cases() {
        let dup: Vec<Vec<f64>> = [1.0, 2.0, 4.0, 5.0]
            .iter()
            .map(|&x| vec![x, x, x])
            .collect();
        assert!((cronbach_alpha(&dup).unwrap() - 1.0).abs() < 1e-12);
        // item vars 1, 1; totals 2,4,6 var 4 → α = 2·(1 − 2/4) = 1
        let m = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        assert!((cronbach_alpha(&m).unwrap() - 1.0).abs() < 1e-12);
        // items 1,2,3 and 3,1,2: vars 1,1; totals 4,3,5 var 1 → α = 2·(1 − 2) = −2
        let m = vec![vec![1.0, 3.0], vec![2.0, 1.0], vec![3.0, 2.0]];
        assert!((cronbach_alpha(&m).unwrap() + 2.0).abs() < 1e-12);
        assert_eq!(
            cronbach_alpha(&[vec![1.0, 1.0], vec![1.0, 1.0]]),
            Err(StatsError::ZeroTotalVariance)
        );
        assert_eq!(
            cronbach_alpha(&[vec![1.0, 1.0], vec![1.0]]),
            Err(StatsError::Ragged)
        );
    }

    #[test]
    fn likert_cases() {
        let s = likert_summary(&[5, 5, 5]);
        assert_eq!((s.mean, s.sd), (Some(5.0), Some(0.0)));
        let s = likert_summary(&[1, 2, 3, 4, 5, 0]);
        assert_eq!(s.mean, Some(3.0));
        assert_eq!(s.counts, [1, 1, 1, 1, 1]);
        assert_eq!(s.skipped, 1);
        assert_eq!(likert_summary(&[]).mean, None);
    }

    fn shown(repeated: bool) -> Event {
        Event::RecommendationShown {
            from_exercise: "a".into(),
            genai_candidate: Some("b".into()),
            reason: None,
            adaptive_candidate: None,
            repeated,
            offered: vec![Choice::AcceptGenAi],
            phase: Phase::AwaitingAgreement,
        }
    }

    fn decision(offered: Vec<Choice>, chosen: Choice) -> Event {
        Event::RecommendationDecision {
            phase: Phase::AwaitingRecommendationDecision,
            offered,
            chosen,
            repeated: false,
            exercise: Some("b".into()),
            source: None,
        }
    }

    #[test]
    fn rates() {
        let events = vec![
            rec("a", 1, shown(true)),
            rec("a", 2, shown(true)),
            rec("a", 3, shown(false)),
            rec(
                "a",
                4,
                decision(
                    vec![Choice::AcceptGenAi, Choice::UseAdaptive],
                    Choice::UseAdaptive,
                ),
            ),
            rec(
                "a",
                5,
                decision(vec![Choice::AcceptGenAi], Choice::AcceptGenAi),
            ),
            rec(
                "a",
                6,
                decision(vec![Choice::UseAdaptive], Choice::UseAdaptive),
            ),
        ];
        let r = repeat_and_refusal_rates(&events);
        assert!((r.repeat_rate.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.genai_decisions, 2);
        assert_eq!(r.refusal_rate, Some(0.5));
        let none = repeat_and_refusal_rates(&[]);
        assert_eq!((none.repeat_rate, none.refusal_rate), (None, None));
    }

    #[test]
    fn empty_report_is_valid_and_stable() {
        let r = report(&[], &BTreeMap::new());
        assert_eq!(r.events, 0);
        assert_eq!(r.features.len(), 4);
        assert!(r.features.iter().all(|f| f.anova.is_none()));
        assert_eq!(r.to_json(), report(&[], &BTreeMap::new()).to_json());
        assert!(r.to_text().contains("events: 0"));
    }

    #[test]
    fn report_groups_by_mode() {
        let mut events = Vec::new();
        let mut ts = 0;
        for (i, mode) in Mode::ALL.iter().enumerate() {
            for l in 0..3 {
                let name = format!("{mode}-{l}");
                ts += 1;
                events.push(rec(&name, ts, Event::Login { mode: *mode }));
                for k in 0..(l + i + 1) {
                    ts += 1;
                    let c = if k % 2 == 0 {
                        Classification::Correct
                    } else {
                        Classification::Wrong
                    };
                    events.push(rec(&name, ts, submission(c)));
                }
            }
        }
        let groups = groups_from_modes(&events);
        assert_eq!(groups.len(), 9);
        let r = report(&events, &groups);
        let a = r.features[0].anova.as_ref().unwrap();
        assert_eq!((a.df1, a.df2), (2, 6));
        assert_eq!(r.features[0].pairwise.len(), 3);
        for f in &r.learners {
            assert!((f.p_correct + f.p_wrong + f.p_missing - 1.0).abs() < 1e-12);
        }
    }
}
