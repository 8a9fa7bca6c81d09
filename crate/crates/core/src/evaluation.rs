//! Error taxonomy, validity rule, pass@k and aggregate run metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec_orchestrator::{ExecutionReport, Outcome};
use crate::llm_gateway::{estimate_cost, find_profile, Money, ModelProfile, Usage};
use crate::num::Scalar;
use crate::output_parser::Generation;
use crate::prompt_forge::PromptLevel;

/// Largest `n` evaluated with exact rational arithmetic.
pub const EXACT_PASS_AT_K_LIMIT: u64 = 1000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("k = {k} must satisfy 1 <= k <= n = {n}")]
    InvalidK { n: u64, k: u64 },
    #[error("c = {c} exceeds n = {n}")]
    InvalidC { n: u64, c: u64 },
    #[error("run {task_id}#{attempt_no} failed and has no error label")]
    NeedsLabel { task_id: String, attempt_no: u32 },
    #[error("task {task_id} declares n = {declared} but has {actual} runs")]
    InconsistentTask {
        task_id: String,
        declared: u64,
        actual: u64,
    },
    #[error("run {task_id}#{attempt_no} belongs to no task")]
    OrphanRun { task_id: String, attempt_no: u32 },
    #[error("semantic errors need a subcategory; other kinds must not have one")]
    InvalidLabel,
    #[error("unknown error kind `{0}`")]
    UnknownKind(String),
    #[error("no k values requested")]
    NoK,
    #[error("cannot read run log {path}: {reason}")]
    RunLog { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    Syntax,
    Semantic,
    NoTest,
    Permission,
    Defect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticSub {
    Hallucination,
    ApiOutdated,
    Other,
}

impl FromStr for ErrorKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "syntax" => ErrorKind::Syntax,
            "semantic" => ErrorKind::Semantic,
            "notest" => ErrorKind::NoTest,
            "permission" => ErrorKind::Permission,
            "defect" => ErrorKind::Defect,
            _ => return Err(EvalError::UnknownKind(s.to_string())),
        })
    }
}

impl FromStr for SemanticSub {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "hallucination" => SemanticSub::Hallucination,
            "apioutdated" => SemanticSub::ApiOutdated,
            "other" => SemanticSub::Other,
            _ => return Err(EvalError::UnknownKind(s.to_string())),
        })
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A triage label. `semantic_sub` is present exactly for semantic errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LabelWire", into = "LabelWire")]
pub struct ErrorLabel {
    kind: ErrorKind,
    semantic_sub: Option<SemanticSub>,
}

#[derive(Serialize, Deserialize)]
struct LabelWire {
    kind: ErrorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semantic_sub: Option<SemanticSub>,
}

impl TryFrom<LabelWire> for ErrorLabel {
    type Error = EvalError;
    fn try_from(w: LabelWire) -> Result<Self, EvalError> {
        ErrorLabel::new(w.kind, w.semantic_sub)
    }
}

impl From<ErrorLabel> for LabelWire {
    fn from(l: ErrorLabel) -> Self {
        LabelWire {
            kind: l.kind,
            semantic_sub: l.semantic_sub,
        }
    }
}

impl ErrorLabel {
    pub fn new(kind: ErrorKind, semantic_sub: Option<SemanticSub>) -> Result<Self, EvalError> {
        if (kind == ErrorKind::Semantic) != semantic_sub.is_some() {
            return Err(EvalError::InvalidLabel);
        }
        Ok(ErrorLabel { kind, semantic_sub })
    }

    /// Label for any kind other than `Semantic`.
    pub fn simple(kind: ErrorKind) -> Self {
        ErrorLabel::new(kind, None).expect("non-semantic kind")
    }

    pub fn semantic(sub: SemanticSub) -> Self {
        ErrorLabel {
            kind: ErrorKind::Semantic,
            semantic_sub: Some(sub),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        self.kind
    }

    pub fn semantic_sub(&self) -> Option<SemanticSub> {
        self.semantic_sub
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.semantic_sub {
            Some(sub) => write!(f, "Semantic/{sub:?}"),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Whether the prompt carried the full simplified spec or retrieved chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextMode {
    Full,
    #[serde(rename = "RAG")]
    Rag,
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Full => "Full",
            ContextMode::Rag => "RAG",
        })
    }
}

impl FromStr for ContextMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ContextMode::Full),
            "rag" => Ok(ContextMode::Rag),
            _ => Err(format!("unknown mode `{s}` (expected Full or RAG)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptKind {
    Generate,
    Refactor,
}

/// One generation attempt with its execution result and triage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub attempt_no: u32,
    #[serde(default)]
    pub prompt_level: Option<PromptLevel>,
    pub kind: AttemptKind,
    pub service: String,
    pub mode: ContextMode,
    pub model: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub raw_output: String,
    pub generation: Generation,
    #[serde(default)]
    pub report: Option<ExecutionReport>,
    #[serde(default)]
    pub label: Option<ErrorLabel>,
    pub usage: Usage,
    /// Gateway or parse failure recorded instead of a generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn passes(&self) -> bool {
        self.report.as_ref().is_some_and(ExecutionReport::all_passed)
    }
}

/// Valid when the run passes fully or its failure is labelled a defect of
/// the API under test.
pub fn validity_of(r: &RunRecord) -> Result<bool, EvalError> {
    if r.passes() {
        return Ok(true);
    }
    match r.label {
        Some(l) => Ok(l.kind() == ErrorKind::Defect),
        None => Err(EvalError::NeedsLabel {
            task_id: r.task_id.clone(),
            attempt_no: r.attempt_no,
        }),
    }
}

fn status_403() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b403\b").expect("static regex"))
}

/// Heuristic pre-fill for the triage form; never authoritative.
pub fn suggest_label(r: &RunRecord) -> Option<ErrorLabel> {
    if r.passes() {
        return None;
    }
    if !r.generation.has_code() {
        return Some(ErrorLabel::simple(ErrorKind::NoTest));
    }
    let report = r.report.as_ref()?;
    if report.outcome == Outcome::Error {
        return Some(ErrorLabel::simple(ErrorKind::Syntax));
    }
    if report.total == 0 {
        return Some(ErrorLabel::simple(ErrorKind::NoTest));
    }
    if report.failure_messages.iter().any(|m| status_403().is_match(m)) {
        return Some(ErrorLabel::simple(ErrorKind::Permission));
    }
    None
}

fn check_pass_args(n: u64, c: u64, k: u64) -> Result<(), EvalError> {
    if k < 1 || k > n {
        return Err(EvalError::InvalidK { n, k });
    }
    if c > n {
        return Err(EvalError::InvalidC { n, c });
    }
    Ok(())
}

/// `1 - C(n-c, k) / C(n, k)` as an exact fraction, via the product
/// `prod_{i<k} (n-c-i)/(n-i)`.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<BigRational, EvalError> {
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(BigRational::one());
    }
    let mut ratio = BigRational::one();
    for i in 0..k {
        ratio *= BigRational::new(BigInt::from(n - c - i), BigInt::from(n - i));
    }
    Ok(BigRational::one() - ratio)
}

/// Unbiased pass@k estimate. Exact for `n <= 1000`, otherwise the numerically
/// stable product `1 - prod_{i=n-c+1}^{n} (1 - k/i)` in `T`.
pub fn pass_at_k<T: Scalar>(n: u64, c: u64, k: u64) -> Result<T, EvalError> {
    if n <= EXACT_PASS_AT_K_LIMIT {
        let exact = pass_at_k_exact(n, c, k)?;
        return Ok(T::from_f64_lossy(exact.to_f64().unwrap_or(f64::NAN)));
    }
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(T::one());
    }
    let kt = T::from_u64(k).expect("count fits a float");
    let mut prod = T::one();
    for i in (n - c + 1)..=n {
        prod = prod * (T::one() - kt / T::from_u64(i).expect("count fits a float"));
    }
    Ok(T::one() - prod)
}

/// `(n, c)` for one task: its attempts and how many are valid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_id: String,
    pub n: u64,
    pub c: u64,
    #[serde(default)]
    pub prompt_level: Option<PromptLevel>,
}

/// Group runs by task. The level of a task is the first level recorded on
/// any of its runs.
pub fn tasks_from_runs(runs: &[RunRecord]) -> Result<Vec<EvalTask>, EvalError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_task: HashMap<&str, EvalTask> = HashMap::new();
    for r in runs {
        let valid = validity_of(r)?;
        let t = by_task.entry(r.task_id.as_str()).or_insert_with(|| {
            order.push(r.task_id.clone());
            EvalTask {
                task_id: r.task_id.clone(),
                n: 0,
                c: 0,
                prompt_level: None,
            }
        });
        t.n += 1;
        t.c += u64::from(valid);
        if t.prompt_level.is_none() {
            t.prompt_level = r.prompt_level;
        }
    }
    Ok(order.iter().map(|id| by_task.remove(id.as_str()).expect("inserted")).collect())
}

/// Mean of pass@k over tasks.
pub fn valid_at_k<T: Scalar>(tasks: &[EvalTask], k: u64) -> Result<T, EvalError> {
    if tasks.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for t in tasks {
        sum = sum + pass_at_k::<T>(t.n, t.c, k)?;
    }
    Ok(sum / T::from_usize(tasks.len()).expect("count fits a float"))
}

/// Exact mean of pass@k over tasks.
pub fn valid_at_k_exact(tasks: &[EvalTask], k: u64) -> Result<BigRational, EvalError> {
    if tasks.is_empty() {
        return Ok(BigRational::zero());
    }
    let mut sum = BigRational::zero();
    for t in tasks {
        sum += pass_at_k_exact(t.n, t.c, k)?;
    }
    Ok(sum / BigRational::from_integer(BigInt::from(tasks.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub tasks: u64,
    pub runs: u64,
    pub valid_runs: u64,
    pub test_cases: u64,
    pub passed_cases: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanUsage<T> {
    pub input_tokens: T,
    pub output_tokens: T,
    pub elapsed_seconds: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary<T> {
    pub ks: Vec<u64>,
    pub overall: BTreeMap<u64, T>,
    pub per_level: BTreeMap<PromptLevel, BTreeMap<u64, T>>,
    pub totals: Totals,
    pub mean_usage: Option<MeanUsage<T>>,
    /// Mean cost over runs whose model has a known price.
    pub mean_cost: Option<Money>,
    pub total_cost: Option<Money>,
}

/// Aggregate valid@k, totals, usage and cost.
///
/// Every run must belong to a task and every task's `n` must equal its run
/// count.
pub fn aggregate_metrics<T: Scalar>(
    tasks: &[EvalTask],
    runs: &[RunRecord],
    ks: &[u64],
    profiles: &[ModelProfile],
) -> Result<MetricsSummary<T>, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::NoK);
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in runs {
        if !tasks.iter().any(|t| t.task_id == r.task_id) {
            return Err(EvalError::OrphanRun {
                task_id: r.task_id.clone(),
                attempt_no: r.attempt_no,
            });
        }
        *counts.entry(r.task_id.as_str()).or_default() += 1;
    }
    for t in tasks {
        let actual = counts.get(t.task_id.as_str()).copied().unwrap_or(0);
        if actual != t.n {
            return Err(EvalError::InconsistentTask {
                task_id: t.task_id.clone(),
                declared: t.n,
                actual,
            });
        }
    }
    let mut overall = BTreeMap::new();
    let mut per_level: BTreeMap<PromptLevel, BTreeMap<u64, T>> = BTreeMap::new();
    for &k in ks {
        overall.insert(k, valid_at_k::<T>(tasks, k)?);
        for level in PromptLevel::ALL {
            let subset: Vec<EvalTask> = tasks.iter().filter(|t| t.prompt_level == Some(level)).cloned().collect();
            if !subset.is_empty() {
                per_level.entry(level).or_default().insert(k, valid_at_k::<T>(&subset, k)?);
            }
        }
    }
    let mut totals = Totals {
        tasks: tasks.len() as u64,
        runs: runs.len() as u64,
        ..Totals::default()
    };
    for r in runs {
        totals.valid_runs += u64::from(validity_of(r)?);
        if let Some(rep) = &r.report {
            totals.test_cases += u64::from(rep.total);
            totals.passed_cases += u64::from(rep.passed);
        }
    }
    let mean_usage = if runs.is_empty() {
        None
    } else {
        let n = T::from_usize(runs.len()).expect("count fits a float");
        let sum = |f: &dyn Fn(&Usage) -> f64| runs.iter().map(|r| T::from_f64_lossy(f(&r.usage))).sum::<T>() / n;
        Some(MeanUsage {
            input_tokens: sum(&|u| u.input_tokens as f64),
            output_tokens: sum(&|u| u.output_tokens as f64),
            elapsed_seconds: sum(&|u| u.elapsed_seconds),
        })
    };
    let priced: Vec<Money> = runs
        .iter()
        .filter_map(|r| find_profile(profiles, &r.model).map(|p| estimate_cost(&r.usage, p)))
        .collect();
    let (mean_cost, total_cost) = if priced.is_empty() {
        (None, None)
    } else {
        let total: Money = priced.iter().copied().sum();
        (Some(total / priced.len() as u64), Some(total))
    };
    Ok(MetricsSummary {
        ks: ks.to_vec(),
        overall,
        per_level,
        totals,
        mean_usage,
        mean_cost,
        total_cost,
    })
}

/// Plain-text rendering of a summary.
pub fn render_table<T: Scalar>(s: &MetricsSummary<T>) -> String {
    let mut out = String::new();
    let header: Vec<String> = s.ks.iter().map(|k| format!("valid@{k}")).collect();
    out.push_str(&format!("{:<8} {}\n", "level", header.iter().map(|h| format!("{h:>9}")).collect::<String>()));
    let row = |name: &str, vals: &BTreeMap<u64, T>| {
        let cells: String = s
            .ks
            .iter()
            .map(|k| match vals.get(k) {
                Some(v) => format!("{:>9.4}", v.to_f64_lossy()),
                None => format!("{:>9}", "-"),
            })
            .collect();
        format!("{name:<8} {cells}\n")
    };
    out.push_str(&row("all", &s.overall));
    for (level, vals) in &s.per_level {
        out.push_str(&row(&level.to_string(), vals));
    }
    let t = &s.totals;
    out.push_str(&format!(
        "tasks {}  runs {}  valid runs {}  test cases {}  passed cases {}\n",
        t.tasks, t.runs, t.valid_runs, t.test_cases, t.passed_cases
    ));
    if let Some(u) = &s.mean_usage {
        out.push_str(&format!(
            "mean input tokens {:.0}  mean output tokens {:.0}  mean time {:.1} s\n",
            u.input_tokens.to_f64_lossy(),
            u.output_tokens.to_f64_lossy(),
            u.elapsed_seconds.to_f64_lossy()
        ));
    }
    if let (Some(mean), Some(total)) = (s.mean_cost, s.total_cost) {
        out.push_str(&format!(
            "mean cost {}  total cost {}\n",
            mean.round_to_cents(),
            total.round_to_cents()
        ));
    }
    out
}

/// Load every `<root>/<task>/<attempt>.json` run log, ordered by task
/// directory name then attempt number.
pub fn load_run_logs(root: &Path) -> Result<Vec<RunRecord>, EvalError> {
    let io = |path: &Path, e: &dyn fmt::Display| EvalError::RunLog {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut task_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io(root, &e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    task_dirs.sort();
    let mut runs = Vec::new();
    for dir in task_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| io(&dir, &e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort_by_key(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u32>().ok())
                .unwrap_or(u32::MAX)
        });
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| io(&f, &e))?;
            let run: RunRecord = serde_json::from_str(&text).map_err(|e| io(&f, &e))?;
            runs.push(run);
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::builtin_profiles;
    use proptest::prelude::*;

    fn run(task: &str, attempt: u32, report: Option<ExecutionReport>, label: Option<ErrorLabel>) -> RunRecord {
        RunRecord {
            task_id: task.into(),
            attempt_no: attempt,
            prompt_level: Some(PromptLevel::L1),
            kind: AttemptKind::Generate,
            service: "catfact".into(),
            mode: ContextMode::Full,
            model: "gpt-4-turbo".into(),
            prompt: String::new(),
            raw_output: String::new(),
            generation: Generation {
                code: Some("test()".into()),
                ..Generation::default()
            },
            report,
            label,
            usage: Usage::tokens(35_289, 698),
            error: None,
            created_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
        }
    }

    fn run_report(total: u32, passed: u32, messages: &[&str]) -> ExecutionReport {
        let mut r = ExecutionReport::error(messages.iter().map(|m| m.to_string()).collect(), 1.0);
        r.outcome = Outcome::Run;
        r.total = total;
        r.passed = passed;
        r.failed = total - passed;
        r
    }

    #[test]
    fn validity_examples() {
        assert_eq!(validity_of(&run("t", 1, Some(run_report(3, 3, &[])), None)), Ok(true));
        let defect = Some(ErrorLabel::simple(ErrorKind::Defect));
        assert_eq!(validity_of(&run("t", 1, Some(run_report(2, 1, &["x"])), defect)), Ok(true));
        let syntax = Some(ErrorLabel::simple(ErrorKind::Syntax));
        assert_eq!(
            validity_of(&run("t", 1, Some(ExecutionReport::error(vec![], 0.0)), syntax)),
            Ok(false)
        );
        assert!(matches!(
            validity_of(&run("t", 2, Some(run_report(2, 1, &[])), None)),
            Err(EvalError::NeedsLabel { attempt_no: 2, .. })
        ));
        // zero-test RUN is not a pass
        assert!(validity_of(&run("t", 1, Some(run_report(0, 0, &[])), None)).is_err());
    }

    #[test]
    fn passing_run_validity_is_label_stable() {
        for label in [
            None,
            Some(ErrorLabel::simple(ErrorKind::Syntax)),
            Some(ErrorLabel::semantic(SemanticSub::Hallucination)),
        ] {
            assert_eq!(validity_of(&run("t", 1, Some(run_report(3, 3, &[])), label)), Ok(true));
        }
    }

    #[test]
    fn suggestions() {
        let mut no_code = run("t", 1, Some(ExecutionReport::error(vec![], 0.0)), None);
        no_code.generation.code = None;
        assert_eq!(suggest_label(&no_code), Some(ErrorLabel::simple(ErrorKind::NoTest)));
        let forbidden = run("t", 1, Some(run_report(1, 0, &["Request failed with status code 403"])), None);
        assert_eq!(suggest_label(&forbidden), Some(ErrorLabel::simple(ErrorKind::Permission)));
        assert_eq!(suggest_label(&run("t", 1, Some(run_report(2, 2, &[])), None)), None);
        let error = run("t", 1, Some(ExecutionReport::error(vec!["SyntaxError".into()], 0.0)), None);
        assert_eq!(suggest_label(&error), Some(ErrorLabel::simple(ErrorKind::Syntax)));
        let empty = run("t", 1, Some(run_report(0, 0, &[])), None);
        assert_eq!(suggest_label(&empty), Some(ErrorLabel::simple(ErrorKind::NoTest)));
        let not_found = run("t", 1, Some(run_report(1, 0, &["Request failed with status code 404"])), None);
        assert_eq!(suggest_label(&not_found), None);
        let id_4031 = run("t", 1, Some(run_report(1, 0, &["expected id 4031"])), None);
        assert_eq!(suggest_label(&id_4031), None);
    }

    #[test]
    fn label_invariant() {
        assert!(ErrorLabel::new(ErrorKind::Semantic, None).is_err());
        assert!(ErrorLabel::new(ErrorKind::Defect, Some(SemanticSub::Other)).is_err());
        let l = ErrorLabel::semantic(SemanticSub::ApiOutdated);
        let v = serde_json::to_value(l).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "Semantic", "semantic_sub": "ApiOutdated"}));
        assert_eq!(serde_json::from_value::<ErrorLabel>(v).unwrap(), l);
        assert!(serde_json::from_value::<ErrorLabel>(serde_json::json!({"kind": "Semantic"})).is_err());
        assert_eq!("no test".parse::<ErrorKind>().unwrap(), ErrorKind::NoTest);
        assert_eq!("api-outdated".parse::<SemanticSub>().unwrap(), SemanticSub::ApiOutdated);
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k::<f64>(3, 3, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k::<f64>(3, 1, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k_exact(3, 1, 1).unwrap(), BigRational::new(1.into(), 3.into()));
        assert_eq!(pass_at_k_exact(5, 2, 2).unwrap(), BigRational::new(7.into(), 10.into()));
        assert_eq!(pass_at_k::<f64>(3, 0, 2).unwrap(), 0.0);
        assert_eq!(pass_at_k::<f64>(3, 1, 0), Err(EvalError::InvalidK { n: 3, k: 0 }));
        assert_eq!(pass_at_k::<f64>(3, 1, 4), Err(EvalError::InvalidK { n: 3, k: 4 }));
        assert_eq!(pass_at_k::<f32>(3, 4, 1), Err(EvalError::InvalidC { n: 3, c: 4 }));
    }

    #[test]
    fn float_branch_agrees_with_exact_near_the_limit() {
        for (n, c, k) in [(1001u64, 10u64, 5u64), (2000, 1000, 3), (5000, 1, 1)] {
            let float = pass_at_k::<f64>(n, c, k).unwrap();
            let exact = {
                let mut r = BigRational::one();
                for i in 0..k {
                    r *= BigRational::new(BigInt::from(n - c - i), BigInt::from(n - i));
                }
                (BigRational::one() - r).to_f64().unwrap()
            };
            assert!((float - exact).abs() < 1e-12, "{n} {c} {k}: {float} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_c(n in 1u64..40, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..1.0) {
            let c = ((n as f64) * c_frac).floor() as u64;
            let k = 1 + ((n as f64 - 1.0) * k_frac).floor() as u64;
            let p = pass_at_k_exact(n, c, k).unwrap();
            if k < n {
                prop_assert!(pass_at_k_exact(n, c, k + 1).unwrap() >= p);
            }
            if c < n {
                prop_assert!(pass_at_k_exact(n, c + 1, k).unwrap() >= p);
            }
        }

        #[test]
        fn valid_at_1_is_pooled_rate_for_equal_n(n in 1u64..6, cs in proptest::collection::vec(0u64..6, 1..20)) {
            let tasks: Vec<EvalTask> = cs.iter().enumerate().map(|(i, c)| EvalTask {
                task_id: i.to_string(), n, c: c % (n + 1), prompt_level: None,
            }).collect();
            let sum_c: u64 = tasks.iter().map(|t| t.c).sum();
            let expected = BigRational::new(BigInt::from(sum_c), BigInt::from(n * tasks.len() as u64));
            prop_assert_eq!(valid_at_k_exact(&tasks, 1).unwrap(), expected);
        }
    }

    #[test]
    fn aggregate_small_cases() {
        let runs: Vec<RunRecord> = (1..=3)
            .map(|i| run("a", i, Some(ExecutionReport::error(vec![], 0.0)), Some(ErrorLabel::simple(ErrorKind::Syntax))))
            .collect();
        let tasks = tasks_from_runs(&runs).unwrap();
        assert_eq!(tasks[0].n, 3);
        assert_eq!(tasks[0].c, 0);
        let s = aggregate_metrics::<f64>(&tasks, &runs, &[1, 2, 3], &builtin_profiles()).unwrap();
        assert!(s.overall.values().all(|v| *v == 0.0));

        let one = vec![run("b", 1, Some(run_report(1, 1, &[])), None)];
        let s = aggregate_metrics::<f32>(&tasks_from_runs(&one).unwrap(), &one, &[1], &builtin_profiles()).unwrap();
        assert_eq!(s.overall[&1], 1.0);
        assert_eq!(s.mean_cost.unwrap().round_to_cents(), "0.37".parse().unwrap());
        assert_eq!(s.per_level[&PromptLevel::L1][&1], 1.0);
    }

    #[test]
    fn aggregate_rejects_inconsistency() {
        let runs = vec![run("a", 1, Some(run_report(1, 1, &[])), None)];
        let bad = vec![EvalTask {
            task_id: "a".into(),
            n: 2,
            c: 1,
            prompt_level: None,
        }];
        assert!(matches!(
            aggregate_metrics::<f64>(&bad, &runs, &[1], &[]),
            Err(EvalError::InconsistentTask { .. })
        ));
        assert!(matches!(
            aggregate_metrics::<f64>(&[], &runs, &[1], &[]),
            Err(EvalError::OrphanRun { .. })
        ));
        assert_eq!(aggregate_metrics::<f64>(&[], &[], &[], &[]), Err(EvalError::NoK));
    }

    #[test]
    fn table_rendering() {
        let runs = vec![run("a", 1, Some(run_report(3, 3, &[])), None)];
        let s = aggregate_metrics::<f64>(&tasks_from_runs(&runs).unwrap(), &runs, &[1], &builtin_profiles()).unwrap();
        let t = render_table(&s);
        assert!(t.contains("valid@1"));
        assert!(t.contains("all         1.0000"));
        assert!(t.contains("mean cost 0.37"));
    }

    #[test]
    fn run_logs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![
            run("task-b", 2, Some(run_report(1, 1, &[])), None),
            run("task-a", 10, None, None),
            run("task-a", 2, None, Some(ErrorLabel::semantic(SemanticSub::Other))),
        ];
        for r in &runs {
            let d = dir.path().join(&r.task_id);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join(format!("{}.json", r.attempt_no)), serde_json::to_string_pretty(r).unwrap()).unwrap();
        }
        let loaded = load_run_logs(dir.path()).unwrap();
        let ids: Vec<(String, u32)> = loaded.iter().map(|r| (r.task_id.clone(), r.attempt_no)).collect();
        assert_eq!(
            ids,
            [("task-a".to_string(), 2), ("task-a".to_string(), 10), ("task-b".to_string(), 2)]
        );
        assert_eq!(loaded[0], runs[2]);
    }
}
