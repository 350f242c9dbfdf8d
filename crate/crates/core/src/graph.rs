//! Concept/exercise graph: loading, validation and curriculum queries.
//!
//! The graph is immutable once built. Both the adaptive selector and the
//! retrieval index read from it; reloading means building a new graph and
//! swapping it in whole.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Difficulty band shared by exercises and learner placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Easy,
    Standard,
    Difficult,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Standard, Level::Difficult];

    /// Seed difficulty for items authored at this level.
    pub fn seed_difficulty(self) -> f64 {
        match self {
            Level::Easy => -1.0,
            Level::Standard => 0.0,
            Level::Difficult => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Easy => "Easy",
            Level::Standard => "Standard",
            Level::Difficult => "Difficult",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub upper_concept: Option<String>,
    pub order_index: u32,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCase {
    #[serde(default)]
    pub inputs: Vec<String>,
    pub expected_output: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Statements {
    pub en: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub th: Option<String>,
}

impl Statements {
    /// Statement in `locale`, falling back to English.
    pub fn get(&self, locale: &str) -> &str {
        match locale {
            "th" => self.th.as_deref().unwrap_or(&self.en),
            _ => &self.en,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hint {
    pub concept: String,
    #[serde(default)]
    pub points: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exercise {
    pub id: String,
    pub concept_id: String,
    pub language_id: String,
    pub level: Level,
    pub statements: Statements,
    #[serde(default)]
    pub hints: Vec<Hint>,
    #[serde(default)]
    pub required_markers: Vec<Vec<String>>,
    pub test_cases: Vec<TestCase>,
    pub reference_solution: String,
    /// Authored override of the seed difficulty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

impl Exercise {
    /// Initial item difficulty: the authored override or the level seed.
    pub fn initial_difficulty(&self) -> f64 {
        self.difficulty
            .unwrap_or_else(|| self.level.seed_difficulty())
    }

    /// All hint point labels in authored order.
    pub fn hint_points(&self) -> impl Iterator<Item = &str> {
        self.hints
            .iter()
            .flat_map(|h| h.points.iter().map(String::as_str))
    }
}

/// On-disk document shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub concepts: Vec<Concept>,
    pub exercises: Vec<Exercise>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dangling references: {}", .0.join(", "))]
    Dangling(Vec<String>),
    #[error("graph invalid: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    DuplicateConceptId,
    DuplicateExerciseId,
    DanglingUpperConcept,
    DanglingConcept,
    UpperConceptCycle,
    DuplicateOrderIndex,
    NoTestCases,
    EmptyExpectedOutput,
    EmptyStatement,
    EmptyMarkerSet,
    LevelCoverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    pub message: String,
}

impl Violation {
    fn error(code: ViolationCode, message: String) -> Self {
        Self {
            code,
            severity: Severity::Error,
            message,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    concepts: Vec<Concept>,
    exercises: Vec<Exercise>,
    concept_pos: HashMap<String, usize>,
    exercise_pos: HashMap<String, usize>,
    // concept id -> exercise positions, sorted by exercise id
    by_concept: HashMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds indices without validating. Duplicate ids keep the first entry.
    pub fn from_parts(concepts: Vec<Concept>, exercises: Vec<Exercise>) -> Self {
        let mut concept_pos = HashMap::new();
        for (i, c) in concepts.iter().enumerate() {
            concept_pos.entry(c.id.clone()).or_insert(i);
        }
        let mut exercise_pos = HashMap::new();
        let mut by_concept: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in exercises.iter().enumerate() {
            if exercise_pos.contains_key(&e.id) {
                continue;
            }
            exercise_pos.insert(e.id.clone(), i);
            by_concept.entry(e.concept_id.clone()).or_default().push(i);
        }
        for list in by_concept.values_mut() {
            list.sort_by(|&a, &b| exercises[a].id.cmp(&exercises[b].id));
        }
        Self {
            concepts,
            exercises,
            concept_pos,
            exercise_pos,
            by_concept,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let kg = Self::from_parts(file.concepts, file.exercises);
        kg.check()?;
        Ok(kg)
    }

    fn check(&self) -> Result<(), GraphError> {
        let violations = validate_graph(self);
        let dangling: Vec<String> = violations
            .iter()
            .filter(|v| v.code == ViolationCode::DanglingConcept)
            .map(|v| v.message.clone())
            .collect();
        if !dangling.is_empty() {
            return Err(GraphError::Dangling(dangling));
        }
        let errors: Vec<Violation> = violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
            .cloned()
            .collect();
        if !errors.is_empty() {
            return Err(GraphError::Invalid(errors));
        }
        for w in violations
            .iter()
            .filter(|v| v.severity == Severity::Warning)
        {
            tracing::warn!(code = ?w.code, "{}", w.message);
        }
        Ok(())
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            concepts: self.concepts.clone(),
            exercises: self.exercises.clone(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("graph serializes")
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn exercises(&self) -> &[Exercise] {
        &self.exercises
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concept_pos.get(id).map(|&i| &self.concepts[i])
    }

    pub fn exercise(&self, id: &str) -> Option<&Exercise> {
        self.exercise_pos.get(id).map(|&i| &self.exercises[i])
    }

    /// Concepts of one practice language in curriculum order.
    pub fn concepts_for_language<'a>(&'a self, language_id: &'a str) -> Vec<&'a Concept> {
        let mut out: Vec<&Concept> = self
            .concepts
            .iter()
            .filter(|c| c.language == language_id)
            .collect();
        out.sort_by(|a, b| a.order_index.cmp(&b.order_index).then(a.id.cmp(&b.id)));
        out
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.concepts
            .iter()
            .map(|c| c.language.as_str())
            .chain(self.exercises.iter().map(|e| e.language_id.as_str()))
            .collect()
    }

    /// All exercises of a concept, ascending by id.
    pub fn concept_exercises(&self, concept_id: &str) -> impl Iterator<Item = &Exercise> {
        self.by_concept
            .get(concept_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.exercises[i])
    }

    fn language_concept(
        &self,
        language_id: &str,
        concept_id: &str,
    ) -> Result<&Concept, GraphError> {
        match self.concept(concept_id) {
            Some(c) if c.language == language_id => Ok(c),
            _ => Err(GraphError::UnknownConcept(concept_id.to_string())),
        }
    }

    /// The unmastered concept with the smallest order index after `current`.
    pub fn next_concept(
        &self,
        language_id: &str,
        current_concept_id: &str,
        mastered: &HashSet<String>,
    ) -> Result<Option<&Concept>, GraphError> {
        let current = self.language_concept(language_id, current_concept_id)?;
        Ok(self
            .concepts
            .iter()
            .filter(|c| c.language == language_id)
            .filter(|c| c.order_index > current.order_index)
            .filter(|c| !mastered.contains(&c.id))
            .min_by(|a, b| a.order_index.cmp(&b.order_index).then(a.id.cmp(&b.id))))
    }

    /// Exercises of a concept, optionally one level only, ascending by id.
    pub fn exercises_for(
        &self,
        language_id: &str,
        concept_id: &str,
        level: Option<Level>,
        exclude: &HashSet<String>,
    ) -> Result<Vec<&Exercise>, GraphError> {
        self.language_concept(language_id, concept_id)?;
        Ok(self
            .concept_exercises(concept_id)
            .filter(|e| e.language_id == language_id)
            .filter(|e| level.is_none_or(|l| e.level == l))
            .filter(|e| !exclude.contains(&e.id))
            .collect())
    }
}

/// The bundled three-concept Python curriculum.
pub const SAMPLE_GRAPH_JSON: &str = include_str!("../resources/sample_graph.json");

pub fn sample_graph() -> KnowledgeGraph {
    KnowledgeGraph::from_json_str(SAMPLE_GRAPH_JSON).expect("bundled sample graph is valid")
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<KnowledgeGraph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    KnowledgeGraph::from_json_str(&text)
}

/// Checks every graph invariant. An empty result means the graph is clean.
pub fn validate_graph(kg: &KnowledgeGraph) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for c in &kg.concepts {
        if !seen.insert(c.id.as_str()) {
            out.push(Violation::error(
                DuplicateConceptId,
                format!("duplicate concept id {:?}", c.id),
            ));
        }
    }
    let mut seen = HashSet::new();
    for e in &kg.exercises {
        if !seen.insert(e.id.as_str()) {
            out.push(Violation::error(
                DuplicateExerciseId,
                format!("duplicate exercise id {:?}", e.id),
            ));
        }
    }

    for c in &kg.concepts {
        if let Some(up) = &c.upper_concept {
            if kg.concept(up).is_none() {
                out.push(Violation::error(
                    DanglingUpperConcept,
                    format!("concept {:?} has unknown upper concept {:?}", c.id, up),
                ));
            }
        }
    }

    // Walk upper_concept chains; a chain longer than the concept count loops.
    let mut reported = HashSet::new();
    for c in &kg.concepts {
        let mut cur = c;
        let mut path = vec![c.id.as_str()];
        while let Some(up) = cur.upper_concept.as_deref().and_then(|u| kg.concept(u)) {
            if let Some(start) = path.iter().position(|p| *p == up.id) {
                let mut cycle: Vec<&str> = path[start..].to_vec();
                cycle.sort_unstable();
                if reported.insert(cycle.join(",")) {
                    out.push(Violation::error(
                        UpperConceptCycle,
                        format!("upper_concept cycle through {}", path[start..].join(" -> ")),
                    ));
                }
                break;
            }
            path.push(up.id.as_str());
            cur = up;
        }
    }

    let mut order: HashMap<(&str, u32), &str> = HashMap::new();
    for c in &kg.concepts {
        if let Some(other) = order.insert((c.language.as_str(), c.order_index), c.id.as_str()) {
            out.push(Violation::error(
                DuplicateOrderIndex,
                format!(
                    "concepts {:?} and {:?} share order_index {} in language {:?}",
                    other, c.id, c.order_index, c.language
                ),
            ));
        }
    }

    for e in &kg.exercises {
        if kg.concept(&e.concept_id).is_none() {
            out.push(Violation::error(
                DanglingConcept,
                format!(
                    "exercise {:?} references unknown concept {:?}",
                    e.id, e.concept_id
                ),
            ));
        }
        if e.test_cases.is_empty() {
            out.push(Violation::error(
                NoTestCases,
                format!("exercise {:?} has no test cases", e.id),
            ));
        }
        for (i, tc) in e.test_cases.iter().enumerate() {
            if tc.expected_output.is_empty() {
                out.push(Violation::error(
                    EmptyExpectedOutput,
                    format!(
                        "exercise {:?} test case {} has empty expected output",
                        e.id, i
                    ),
                ));
            }
        }
        if e.statements.en.trim().is_empty() {
            out.push(Violation::error(
                EmptyStatement,
                format!("exercise {:?} has an empty English statement", e.id),
            ));
        }
        for (i, set) in e.required_markers.iter().enumerate() {
            if set.is_empty() {
                out.push(Violation::error(
                    EmptyMarkerSet,
                    format!("exercise {:?} marker set {} is empty", e.id, i),
                ));
            }
        }
    }

    let mut coverage: BTreeMap<(&str, &str), BTreeSet<Level>> = BTreeMap::new();
    for e in &kg.exercises {
        coverage
            .entry((e.language_id.as_str(), e.concept_id.as_str()))
            .or_default()
            .insert(e.level);
    }
    for ((lang, concept), levels) in coverage {
        for level in Level::ALL {
            if !levels.contains(&level) {
                out.push(Violation {
                    code: LevelCoverage,
                    severity: Severity::Warning,
                    message: format!(
                        "concept {concept:?} in language {lang:?} has no {level} exercise"
                    ),
                });
            }
        }
    }

    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn concept(id: &str, order: u32) -> Concept {
        Concept {
            id: id.into(),
            name: id.into(),
            upper_concept: None,
            order_index: order,
            language: "identity".into(),
        }
    }

    pub fn exercise(id: &str, concept: &str, level: Level) -> Exercise {
        Exercise {
            id: id.into(),
            concept_id: concept.into(),
            language_id: "identity".into(),
            level,
            statements: Statements {
                en: format!("Print the word for {id}"),
                th: None,
            },
            hints: vec![Hint {
                concept: concept.into(),
                points: vec!["print_statement".into()],
            }],
            required_markers: vec![],
            test_cases: vec![TestCase {
                inputs: vec![],
                expected_output: vec![format!("out_{id}")],
            }],
            reference_solution: format!("out_{id}"),
            difficulty: None,
        }
    }

    /// Three concepts in order, one exercise per level each.
    pub fn small_graph() -> KnowledgeGraph {
        let concepts = vec![
            concept("variables", 0),
            concept("conditionals", 1),
            concept("loops", 2),
        ];
        let mut exercises = Vec::new();
        for c in ["variables", "conditionals", "loops"] {
            for (n, level) in Level::ALL.into_iter().enumerate() {
                exercises.push(exercise(&format!("{c}-{n}"), c, level));
            }
        }
        KnowledgeGraph::from_parts(concepts, exercises)
    }
}
