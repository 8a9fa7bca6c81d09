//! Running generated scripts in the sandbox and normalizing the runner's
//! JSON report.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompt_forge::{EnvVarDescriptor, PromptError};

pub const SCRIPT_FILE: &str = "generated.test.ts";
pub const ALLOWLIST_FILE: &str = ".env.allowlist";
const RUNS_DIR: &str = ".runs";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("sandbox directory {0} does not exist")]
    SandboxMissing(PathBuf),
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Allowlist { path: PathBuf, source: PromptError },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("report is not a JSON object")]
    NotAnObject,
    #[error("report field `{0}` is missing or not a count")]
    MissingField(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "RUN")]
    Run,
    #[serde(rename = "ERROR")]
    Error,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Run => "RUN",
            Outcome::Error => "ERROR",
        })
    }
}

/// Normalized result of one script execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub outcome: Outcome,
    pub total: u32,
    pub passed: u32,
    pub failed: u32,
    pub failure_messages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_report: Option<Value>,
    pub elapsed_seconds: f64,
}

impl ExecutionReport {
    pub fn error(messages: Vec<String>, elapsed_seconds: f64) -> Self {
        ExecutionReport {
            outcome: Outcome::Error,
            total: 0,
            passed: 0,
            failed: 0,
            failure_messages: messages,
            raw_report: None,
            elapsed_seconds,
        }
    }

    pub fn run(counts: ReportCounts, raw_report: Option<Value>, elapsed_seconds: f64) -> Self {
        ExecutionReport {
            outcome: Outcome::Run,
            total: counts.passed + counts.failed,
            passed: counts.passed,
            failed: counts.failed,
            failure_messages: counts.failure_messages,
            raw_report,
            elapsed_seconds,
        }
    }

    /// RUN with at least one test and no failures.
    pub fn all_passed(&self) -> bool {
        self.outcome == Outcome::Run && self.failed == 0 && self.total >= 1
    }

    /// Text handed to the refactoring prompt.
    pub fn error_log(&self) -> String {
        if self.failure_messages.iter().any(|m| !m.trim().is_empty()) {
            self.failure_messages.join("\n\n")
        } else {
            self.summary()
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} total, {} passed, {} failed",
            self.outcome, self.total, self.passed, self.failed
        )
    }
}

/// Counts read from a runner report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportCounts {
    pub total: u32,
    pub passed: u32,
    pub failed: u32,
    pub failure_messages: Vec<String>,
}

fn count_field(raw: &Value, name: &'static str) -> Result<u32, ReportError> {
    raw.get(name)
        .and_then(Value::as_u64)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or(ReportError::MissingField(name))
}

/// Read `numTotalTests`, `numPassedTests`, `numFailedTests` and the
/// non-empty `testResults[*].message` entries.
pub fn parse_report(raw: &Value) -> Result<ReportCounts, ReportError> {
    if !raw.is_object() {
        return Err(ReportError::NotAnObject);
    }
    let total = count_field(raw, "numTotalTests")?;
    let passed = count_field(raw, "numPassedTests")?;
    let failed = count_field(raw, "numFailedTests")?;
    let failure_messages = raw
        .get("testResults")
        .and_then(Value::as_array)
        .map(|results| {
            results
                .iter()
                .filter_map(|r| r.get("message").and_then(Value::as_str))
                .filter(|m| !m.trim().is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    Ok(ReportCounts {
        total,
        passed,
        failed,
        failure_messages,
    })
}

/// Locate the JSON report in runner stdout: the whole text, or the last line
/// that parses as an object.
fn find_report(stdout: &str) -> Option<Value> {
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(stdout.trim()) {
        return Some(v);
    }
    stdout
        .lines()
        .rev()
        .filter(|l| l.trim_start().starts_with('{'))
        .find_map(|l| match serde_json::from_str::<Value>(l.trim()) {
            Ok(v @ Value::Object(_)) => Some(v),
            _ => None,
        })
}

/// Map runner output to a report. A report whose suites failed to load and
/// that ran no test is an ERROR: the script could not be executed.
pub fn interpret_output(stdout: &str, stderr: &str, elapsed_seconds: f64) -> ExecutionReport {
    let Some(raw) = find_report(stdout) else {
        let mut messages = Vec::new();
        if !stderr.trim().is_empty() {
            messages.push(stderr.trim().to_string());
        }
        if messages.is_empty() {
            messages.push("runner produced no report".to_string());
        }
        return ExecutionReport::error(messages, elapsed_seconds);
    };
    match parse_report(&raw) {
        Ok(counts) => {
            let broken_suites = raw.get("numRuntimeErrorTestSuites").and_then(Value::as_u64).unwrap_or(0);
            if counts.total == 0 && broken_suites > 0 {
                let mut messages = counts.failure_messages;
                if messages.is_empty() && !stderr.trim().is_empty() {
                    messages.push(stderr.trim().to_string());
                }
                let mut report = ExecutionReport::error(messages, elapsed_seconds);
                report.raw_report = Some(raw);
                return report;
            }
            if counts.total != counts.passed + counts.failed {
                tracing::info!(
                    "report lists {} tests but only {} ran; skipped tests are not counted",
                    counts.total,
                    counts.passed + counts.failed
                );
            }
            ExecutionReport::run(counts, Some(raw), elapsed_seconds)
        }
        Err(e) => {
            let mut report = ExecutionReport::error(vec![format!("unusable runner report: {e}")], elapsed_seconds);
            report.raw_report = Some(raw);
            report
        }
    }
}

/// Write `code` to `generated.test.ts` in `dir` with LF line endings.
pub fn materialize_script(code: &str, dir: &Path) -> Result<PathBuf, ExecError> {
    if !dir.is_dir() {
        return Err(ExecError::SandboxMissing(dir.to_path_buf()));
    }
    let path = dir.join(SCRIPT_FILE);
    let normalized = code.replace("\r\n", "\n").replace('\r', "\n");
    std::fs::write(&path, normalized).map_err(|e| ExecError::Write {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok(path)
}

/// Read `<sandbox>/.env.allowlist`; a missing file is an empty list.
pub fn load_allowlist(sandbox_dir: &Path) -> Result<Vec<EnvVarDescriptor>, ExecError> {
    let path = sandbox_dir.join(ALLOWLIST_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| ExecError::Read {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    EnvVarDescriptor::parse_list(&text).map_err(|source| ExecError::Allowlist { path, source })
}

/// How the test runner is invoked. `{file}` in `args` is replaced by the
/// script path relative to the sandbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    pub program: String,
    pub args: Vec<String>,
    pub timeout_seconds: f64,
    pub baseline_env: Vec<String>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            program: "npx".into(),
            args: vec!["jest".into(), "--json".into(), "{file}".into()],
            timeout_seconds: 120.0,
            baseline_env: vec![
                "PATH".into(),
                "HOME".into(),
                "USERPROFILE".into(),
                "npm_config_cache".into(),
            ],
        }
    }
}

/// Stateless runner front-end bound to one sandbox directory.
#[derive(Debug, Clone)]
pub struct ExecOrchestrator {
    sandbox_dir: PathBuf,
    runner: RunnerConfig,
    env_values: HashMap<String, String>,
    keep_run_dirs: bool,
}

impl ExecOrchestrator {
    pub fn new(sandbox_dir: impl Into<PathBuf>, runner: RunnerConfig) -> Self {
        ExecOrchestrator {
            sandbox_dir: sandbox_dir.into(),
            runner,
            env_values: HashMap::new(),
            keep_run_dirs: false,
        }
    }

    /// Values for allowlisted variables; names without an entry here are
    /// read from this process's environment.
    pub fn with_env_values(mut self, values: HashMap<String, String>) -> Self {
        self.env_values = values;
        self
    }

    pub fn keep_run_dirs(mut self, keep: bool) -> Self {
        self.keep_run_dirs = keep;
        self
    }

    pub fn sandbox_dir(&self) -> &Path {
        &self.sandbox_dir
    }

    pub fn runner(&self) -> &RunnerConfig {
        &self.runner
    }

    pub fn allowlist(&self) -> Result<Vec<EnvVarDescriptor>, ExecError> {
        load_allowlist(&self.sandbox_dir)
    }

    /// Materialize `code` in a fresh run directory and execute it with the
    /// sandbox allowlist.
    pub fn execute(&self, code: &str) -> Result<ExecutionReport, ExecError> {
        if !self.sandbox_dir.is_dir() {
            return Err(ExecError::SandboxMissing(self.sandbox_dir.clone()));
        }
        let allowlist = self.allowlist()?;
        let run_dir = self
            .sandbox_dir
            .join(RUNS_DIR)
            .join(uuid::Uuid::new_v4().simple().to_string());
        std::fs::create_dir_all(&run_dir).map_err(|e| ExecError::Write {
            path: run_dir.clone(),
            reason: e.to_string(),
        })?;
        let file = materialize_script(code, &run_dir)?;
        let report = self.run_script(&file, &allowlist, Duration::from_secs_f64(self.runner.timeout_seconds));
        if !self.keep_run_dirs {
            if let Err(e) = std::fs::remove_dir_all(&run_dir) {
                tracing::warn!("could not remove {}: {e}", run_dir.display());
            }
        }
        Ok(report)
    }

    fn child_env(&self, allowlist: &[EnvVarDescriptor]) -> Vec<(String, String)> {
        let mut env = Vec::new();
        for name in &self.runner.baseline_env {
            if let Ok(v) = std::env::var(name) {
                env.push((name.clone(), v));
            }
        }
        for d in allowlist {
            let value = self
                .env_values
                .get(&d.name)
                .cloned()
                .or_else(|| std::env::var(&d.name).ok());
            match value {
                Some(v) => env.push((d.name.clone(), v)),
                None => tracing::warn!("allowlisted variable {} has no value", d.name),
            }
        }
        env
    }

    /// Run the configured runner on `file` with only baseline and
    /// allowlisted variables in its environment.
    pub fn run_script(&self, file: &Path, allowlist: &[EnvVarDescriptor], timeout: Duration) -> ExecutionReport {
        let started = Instant::now();
        let rel = file.strip_prefix(&self.sandbox_dir).unwrap_or(file);
        let rel = rel.to_string_lossy().replace('\\', "/");
        let args: Vec<String> = self.runner.args.iter().map(|a| a.replace("{file}", &rel)).collect();
        let mut cmd = Command::new(&self.runner.program);
        cmd.args(&args)
            .current_dir(&self.sandbox_dir)
            .env_clear()
            .envs(self.child_env(allowlist))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                return ExecutionReport::error(
                    vec![format!("failed to start `{}`: {e}", self.runner.program)],
                    started.elapsed().as_secs_f64(),
                )
            }
        };
        let out_reader = drain(child.stdout.take());
        let err_reader = drain(child.stderr.take());
        let timed_out = loop {
            match child.try_wait() {
                Ok(Some(_)) => break false,
                Ok(None) if started.elapsed() >= timeout => {
                    kill_tree(&mut child);
                    let _ = child.wait();
                    break true;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(20)),
                Err(e) => {
                    let _ = child.kill();
                    return ExecutionReport::error(
                        vec![format!("waiting for runner failed: {e}")],
                        started.elapsed().as_secs_f64(),
                    );
                }
            }
        };
        let elapsed = started.elapsed().as_secs_f64();
        if timed_out {
            return ExecutionReport::error(vec![format!("timeout after {} s", timeout.as_secs_f64())], elapsed);
        }
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        interpret_output(&stdout, &stderr, elapsed)
    }
}

/// Kill the runner and everything it spawned (`npx` starts the test runner
/// as a grandchild).
fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let _ = Command::new("kill")
            .args(["-KILL", "--", &format!("-{}", child.id())])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
    }
    let _ = child.kill();
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}
