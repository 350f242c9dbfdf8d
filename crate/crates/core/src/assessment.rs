//! Running submissions against test cases and classifying them.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Exercise;

/// Shown in place of program output after a crash, a timeout or no output.
pub const NO_OUTPUT: &str = "∅ (no output)";

/// Language id of the built-in runner whose program text is its stdout.
pub const IDENTITY_LANGUAGE: &str = "identity";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("no runner configured for language {0:?}")]
    NoRunner(String),
    #[error("runner binary {0:?} not found")]
    BinaryMissing(String),
    #[error("runner command for {0:?} is empty")]
    EmptyCommand(String),
    #[error("failed to launch runner: {0}")]
    Launch(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Exited { code: i32 },
    Crashed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCapture {
    pub stdout: String,
    pub status: RunStatus,
    /// Output exceeded the byte cap and was cut.
    pub truncated: bool,
}

impl RunCapture {
    fn exited_cleanly(&self) -> bool {
        self.status == RunStatus::Exited { code: 0 }
    }
}

/// Executes learner code for one stdin payload.
pub trait CodeRunner: Send + Sync {
    fn run(&self, language_id: &str, code: &str, stdin: &str) -> Result<RunCapture, RunnerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerSpec {
    /// Whitespace-separated argv; `{file}` is replaced by the source path
    /// and `{dir}` by its directory.
    pub cmd: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_output")]
    pub max_output_bytes: usize,
    /// Name of the source file written for each run.
    #[serde(default = "default_file_name")]
    pub file_name: String,
}

fn default_timeout_ms() -> u64 {
    5_000
}

fn default_max_output() -> usize {
    64 * 1024
}

fn default_file_name() -> String {
    "main".into()
}

impl RunnerSpec {
    pub fn new(cmd: impl Into<String>) -> Self {
        Self {
            cmd: cmd.into(),
            timeout_ms: default_timeout_ms(),
            max_output_bytes: default_max_output(),
            file_name: default_file_name(),
        }
    }
}

/// Subprocess runners keyed by language id. The identity language is always
/// available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunnerConfig {
    pub runners: BTreeMap<String, RunnerSpec>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        let mut runners = BTreeMap::new();
        runners.insert(
            "python".to_string(),
            RunnerSpec {
                file_name: "main.py".into(),
                ..RunnerSpec::new("python3 {file}")
            },
        );
        Self { runners }
    }
}

impl RunnerConfig {
    pub fn empty() -> Self {
        Self {
            runners: BTreeMap::new(),
        }
    }

    pub fn supports(&self, language_id: &str) -> bool {
        language_id == IDENTITY_LANGUAGE || self.runners.contains_key(language_id)
    }
}

impl CodeRunner for RunnerConfig {
    fn run(&self, language_id: &str, code: &str, stdin: &str) -> Result<RunCapture, RunnerError> {
        if language_id == IDENTITY_LANGUAGE && !self.runners.contains_key(language_id) {
            return Ok(RunCapture {
                stdout: code.to_string(),
                status: RunStatus::Exited { code: 0 },
                truncated: false,
            });
        }
        let spec = self
            .runners
            .get(language_id)
            .ok_or_else(|| RunnerError::NoRunner(language_id.to_string()))?;
        run_process(language_id, spec, code, stdin)
    }
}

fn run_process(
    language_id: &str,
    spec: &RunnerSpec,
    code: &str,
    stdin: &str,
) -> Result<RunCapture, RunnerError> {
    let dir = tempfile::tempdir()?;
    let file = dir.path().join(&spec.file_name);
    std::fs::write(&file, code)?;
    let file_s = file.to_string_lossy();
    let dir_s = dir.path().to_string_lossy();
    let argv: Vec<String> = spec
        .cmd
        .split_whitespace()
        .map(|a| a.replace("{file}", &file_s).replace("{dir}", &dir_s))
        .collect();
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| RunnerError::EmptyCommand(language_id.to_string()))?;

    let mut child = Command::new(program)
        .args(args)
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RunnerError::BinaryMissing(program.clone()),
            _ => RunnerError::Launch(e),
        })?;

    let mut child_stdin = child.stdin.take().expect("piped stdin");
    let input = stdin.to_string();
    let writer = thread::spawn(move || {
        // a program that never reads its input closes the pipe early
        let _ = child_stdin.write_all(input.as_bytes());
    });
    let mut child_stdout = child.stdout.take().expect("piped stdout");
    let cap = spec.max_output_bytes;
    let reader = thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match child_stdout.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    });

    let deadline = Instant::now() + Duration::from_millis(spec.timeout_ms);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break match status.code() {
                Some(code) => RunStatus::Exited { code },
                None => RunStatus::Crashed,
            };
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            break RunStatus::TimedOut;
        }
        thread::sleep(Duration::from_millis(2));
    };
    let _ = writer.join();
    let (kept, truncated) = reader.join().unwrap_or_default();
    let status = match status {
        RunStatus::Exited { code } if code != 0 => RunStatus::Crashed,
        other => other,
    };
    Ok(RunCapture {
        stdout: String::from_utf8_lossy(&kept).into_owned(),
        status,
        truncated,
    })
}

/// Memoizes runs by (language, code, stdin). Safe only for deterministic
/// programs; used by simulations that resubmit the same sources.
pub struct CachingRunner<R> {
    inner: R,
    cache: Mutex<HashMap<(String, String, String), RunCapture>>,
}

impl<R: CodeRunner> CachingRunner<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<R: CodeRunner> CodeRunner for CachingRunner<R> {
    fn run(&self, language_id: &str, code: &str, stdin: &str) -> Result<RunCapture, RunnerError> {
        let key = (language_id.to_string(), code.to_string(), stdin.to_string());
        if let Some(hit) = self.cache.lock().get(&key) {
            return Ok(hit.clone());
        }
        let out = self.inner.run(language_id, code, stdin)?;
        self.cache.lock().insert(key, out.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub case_index: usize,
    pub passed: bool,
    pub actual_output: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Correct,
    Wrong,
    MissingLogic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentOutcome {
    pub classification: Classification,
    pub results: Vec<TestResult>,
    pub all_passed: bool,
}

/// Lines with trailing whitespace removed and trailing blank lines dropped.
fn normalized<'a>(lines: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = lines.map(str::trim_end).collect();
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out
}

pub fn outputs_match(actual: &str, expected: &[String]) -> bool {
    normalized(actual.lines()) == normalized(expected.iter().flat_map(|l| l.lines()))
}

fn stdin_for(inputs: &[String]) -> String {
    let mut s = inputs.join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s
}

fn displayed_output(capture: &RunCapture) -> String {
    if !capture.exited_cleanly() || normalized(capture.stdout.lines()).is_empty() {
        NO_OUTPUT.to_string()
    } else {
        capture.stdout.clone()
    }
}

pub fn run_tests(
    exercise: &Exercise,
    code: &str,
    runner: &dyn CodeRunner,
) -> Result<Vec<TestResult>, RunnerError> {
    exercise
        .test_cases
        .iter()
        .enumerate()
        .map(|(i, tc)| {
            let capture = runner.run(&exercise.language_id, code, &stdin_for(&tc.inputs))?;
            let passed =
                capture.exited_cleanly() && outputs_match(&capture.stdout, &tc.expected_output);
            Ok(TestResult {
                case_index: i,
                passed,
                actual_output: displayed_output(&capture),
                expected_output: tc.expected_output.join("\n"),
            })
        })
        .collect()
}

/// Runs with the first test case's inputs without judging the result.
pub fn run_once(
    exercise: &Exercise,
    code: &str,
    runner: &dyn CodeRunner,
) -> Result<RunCapture, RunnerError> {
    let inputs = exercise
        .test_cases
        .first()
        .map(|tc| stdin_for(&tc.inputs))
        .unwrap_or_default();
    let mut capture = runner.run(&exercise.language_id, code, &inputs)?;
    if matches!(capture.status, RunStatus::TimedOut) {
        capture.stdout = NO_OUTPUT.to_string();
    }
    Ok(capture)
}

/// Identifier-like tokens: maximal runs of letters, digits and underscores.
pub fn code_tokens(code: &str) -> impl Iterator<Item = &str> {
    code.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
}

/// Index of the first marker set with no member present in the code.
pub fn missing_marker_set(exercise: &Exercise, code: &str) -> Option<usize> {
    let tokens: std::collections::HashSet<&str> = code_tokens(code).collect();
    exercise
        .required_markers
        .iter()
        .position(|set| !set.iter().any(|m| tokens.contains(m.as_str())))
}

pub fn classify_submission(
    exercise: &Exercise,
    code: &str,
    results: Vec<TestResult>,
) -> AssessmentOutcome {
    let all_passed = !results.is_empty() && results.iter().all(|r| r.passed);
    let classification = if code.trim().is_empty() || missing_marker_set(exercise, code).is_some() {
        Classification::MissingLogic
    } else if all_passed {
        Classification::Correct
    } else {
        Classification::Wrong
    };
    AssessmentOutcome {
        classification,
        results,
        all_passed,
    }
}

pub fn assess(
    exercise: &Exercise,
    code: &str,
    runner: &dyn CodeRunner,
) -> Result<AssessmentOutcome, RunnerError> {
    let results = run_tests(exercise, code, runner)?;
    Ok(classify_submission(exercise, code, results))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCase {
    pub case_index: usize,
    pub inputs: Vec<String>,
    pub expected_output: String,
    pub actual_output: String,
}

/// Only the failing cases, in case order.
pub fn failed_cases_view(exercise: &Exercise, results: &[TestResult]) -> Vec<FailedCase> {
    results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| FailedCase {
            case_index: r.case_index,
            inputs: exercise
                .test_cases
                .get(r.case_index)
                .map(|tc| tc.inputs.clone())
                .unwrap_or_default(),
            expected_output: r.expected_output.clone(),
            actual_output: r.actual_output.clone(),
        })
        .collect()
}
