//! Sessions over one requirement: generate, execute, refactor and annotate,
//! persisted as JSON files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{
    aggregate_metrics, load_run_logs, suggest_label, tasks_from_runs, validity_of, AttemptKind, ContextMode,
    ErrorLabel, EvalError, MetricsSummary, RunRecord,
};
use crate::exec_orchestrator::{ExecError, ExecOrchestrator, ExecutionReport};
use crate::llm_gateway::{builtin_profiles, find_profile, Embedder, GatewayError, LlmGateway, ModelProfile, Usage};
use crate::num::Scalar;
use crate::output_parser::{extract_code_block, parse_generation, Generation};
use crate::prompt_forge::{ChatHistory, PromptError, PromptLevel, PromptTemplates, Role};
use crate::rag_index::{
    build_index, expand_requirement, join_context, retrieve_context, ChunkerConfig, RagError, VectorIndex,
    DEFAULT_TOP_K, DEFAULT_VARIANTS,
};
use crate::spec_ingest::{distill, fetch_spec, to_token_text, ApiSpecDoc, IngestError, TokenizerHandle};

/// Simplified specs above this many tokens default to retrieval.
pub const DEFAULT_RAG_THRESHOLD: usize = 100_000;
pub const SESSIONS_DIR: &str = "sessions";
pub const RUNS_DIR: &str = "runs";
/// Error text handed to the refactor prompt when the latest attempt was
/// never executed.
pub const NOT_EXECUTED_LOG: &str = "The test has not been executed yet; no error log is available.";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown spec `{0}`")]
    UnknownSpec(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session {session} has no attempt {attempt}")]
    UnknownAttempt { session: String, attempt: u32 },
    #[error("requirement is empty")]
    EmptyRequirement,
    #[error("session {0} has no attempt to refactor")]
    NothingToRefactor(String),
    #[error("attempts must be at least 1")]
    NoAttempts,
    #[error("storage: {0}")]
    Storage(String),
    #[error("requirement source: {0}")]
    Source(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Rag(#[from] RagError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

type Result<T, E = SessionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub spec: String,
    pub requirement: String,
    #[serde(default)]
    pub setup: String,
    #[serde(default)]
    pub prompt_level: Option<PromptLevel>,
    pub mode: ContextMode,
    pub model: String,
    pub history: ChatHistory,
    pub runs: Vec<RunRecord>,
    pub created_at: chrono::DateTime<Utc>,
}

impl Session {
    pub fn run(&self, attempt: u32) -> Option<&RunRecord> {
        attempt.checked_sub(1).and_then(|i| self.runs.get(i as usize))
    }

    fn run_mut(&mut self, attempt: u32) -> Result<&mut RunRecord> {
        let id = self.id.clone();
        attempt
            .checked_sub(1)
            .and_then(|i| self.runs.get_mut(i as usize))
            .ok_or(SessionError::UnknownAttempt { session: id, attempt })
    }
}

/// Inputs of a new session. `mode: None` picks by spec size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewSession {
    pub spec: String,
    pub requirement: String,
    #[serde(default)]
    pub setup: String,
    #[serde(default)]
    pub mode: Option<ContextMode>,
    pub model: String,
    #[serde(default)]
    pub prompt_level: Option<PromptLevel>,
}

/// Where business requirements come from when not typed in.
pub trait RequirementSource: Send + Sync {
    fn fetch(&self, key: &str) -> Result<String>;
}

/// Issue-tracker seam; no tracker is wired in.
#[derive(Debug, Clone, Copy, Default)]
pub struct JiraStub;

impl RequirementSource for JiraStub {
    fn fetch(&self, key: &str) -> Result<String> {
        Err(SessionError::Source(format!(
            "issue tracker integration is not configured; cannot fetch {key}, paste the requirement text instead"
        )))
    }
}

/// Requirements from an in-memory table.
#[derive(Debug, Clone, Default)]
pub struct StaticRequirements(pub HashMap<String, String>);

impl RequirementSource for StaticRequirements {
    fn fetch(&self, key: &str) -> Result<String> {
        self.0
            .get(key)
            .cloned()
            .ok_or_else(|| SessionError::Source(format!("no requirement `{key}`")))
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Write through a sibling temp file and rename, so readers never see a
/// partial document.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let storage = |e: std::io::Error| SessionError::Storage(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(storage)?;
    }
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    std::fs::write(&tmp, bytes).map_err(storage)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        storage(e)
    })
}

/// `sessions/<id>.json` plus one `runs/<task>/<attempt>.json` per run.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SessionStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join(RUNS_DIR)
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join(SESSIONS_DIR).join(format!("{id}.json"))
    }

    pub fn save(&self, s: &Session) -> Result<()> {
        if !valid_id(&s.id) {
            return Err(SessionError::Storage(format!("invalid session id `{}`", s.id)));
        }
        for r in &s.runs {
            let path = self.runs_dir().join(&r.task_id).join(format!("{}.json", r.attempt_no));
            let body = serde_json::to_vec_pretty(r).map_err(|e| SessionError::Storage(e.to_string()))?;
            atomic_write(&path, &body)?;
        }
        let body = serde_json::to_vec_pretty(s).map_err(|e| SessionError::Storage(e.to_string()))?;
        atomic_write(&self.session_path(&s.id), &body)
    }

    pub fn load(&self, id: &str) -> Result<Session> {
        if !valid_id(id) {
            return Err(SessionError::UnknownSession(id.to_string()));
        }
        let path = self.session_path(id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SessionError::UnknownSession(id.into())),
            Err(e) => return Err(SessionError::Storage(format!("{}: {e}", path.display()))),
        };
        serde_json::from_str(&text).map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))
    }

    /// Session ids, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let dir = self.root.join(SESSIONS_DIR);
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(SessionError::Storage(format!("{}: {e}", dir.display()))),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(str::to_string))?
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub name: String,
    pub source: String,
    pub original_tokens: Option<usize>,
    pub simplified_tokens: Option<usize>,
}

/// Distilled specs by name.
#[derive(Debug, Clone, Default)]
pub struct SpecRegistry {
    specs: BTreeMap<String, Arc<ApiSpecDoc>>,
}

impl SpecRegistry {
    pub fn new() -> Self {
        SpecRegistry::default()
    }

    /// Register a spec, distilling it first when needed.
    pub fn insert(&mut self, doc: ApiSpecDoc, tok: &TokenizerHandle) {
        let doc = if doc.simplified_tokens.is_some() { doc } else { distill(&doc, tok) };
        self.specs.insert(doc.name.clone(), Arc::new(doc));
    }

    /// Every `.json`, `.yaml` and `.yml` file of `dir`, named by file stem.
    pub fn load_dir(dir: &Path, tok: &TokenizerHandle) -> Result<Self> {
        let mut reg = SpecRegistry::new();
        let entries = std::fs::read_dir(dir).map_err(|e| SessionError::Storage(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json" || x == "yaml" || x == "yml"))
            .collect();
        paths.sort();
        for p in paths {
            reg.insert(fetch_spec(&p.to_string_lossy())?, tok);
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<Arc<ApiSpecDoc>> {
        self.specs
            .get(name)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSpec(name.to_string()))
    }

    pub fn list(&self) -> Vec<SpecSummary> {
        self.specs
            .values()
            .map(|d| SpecSummary {
                name: d.name.clone(),
                source: d.source.clone(),
                original_tokens: d.original_tokens,
                simplified_tokens: d.simplified_tokens,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub rag_threshold: usize,
    pub top_k: usize,
    pub variants: usize,
    pub chunker: ChunkerConfig,
    /// Setup instructions used when a session brings none.
    pub default_setup: String,
    /// Index snapshots are read from and written to this directory.
    pub index_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            rag_threshold: DEFAULT_RAG_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            variants: DEFAULT_VARIANTS,
            chunker: ChunkerConfig::default(),
            default_setup: "Generate any data the test needs and clean it up afterwards.".into(),
            index_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecuteResult {
    pub run: RunRecord,
    pub suggested_label: Option<ErrorLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    #[serde(flatten)]
    pub summary: MetricsSummary<T>,
    /// Failing runs left out because they carry no label yet.
    pub pending_triage: usize,
}

/// valid@k over the run logs under `dir`; failing runs without a label
/// are left out and counted as pending. A missing directory has no runs.
pub fn metrics_for_dir<T: Scalar>(dir: &Path, ks: &[u64], profiles: &[ModelProfile]) -> Result<MetricsReport<T>> {
    let all = if dir.exists() { load_run_logs(dir)? } else { Vec::new() };
    let total = all.len();
    let runs: Vec<RunRecord> = all.into_iter().filter(|r| validity_of(r).is_ok()).collect();
    let tasks = tasks_from_runs(&runs)?;
    let summary = aggregate_metrics(&tasks, &runs, ks, profiles)?;
    Ok(MetricsReport {
        pending_triage: total - runs.len(),
        summary,
    })
}

/// Mode for a new session: retrieval when the simplified spec is above the
/// threshold or cannot fit the model's context window.
pub fn auto_mode(simplified_tokens: usize, threshold: usize, profile: &ModelProfile) -> ContextMode {
    if simplified_tokens > threshold || simplified_tokens >= profile.context_window {
        ContextMode::Rag
    } else {
        ContextMode::Full
    }
}

/// The workflows over persisted sessions. Operations on one session are
/// serialized; different sessions proceed in parallel.
pub struct SessionService<T: Scalar> {
    store: SessionStore,
    specs: SpecRegistry,
    gateway: LlmGateway,
    embedder: Arc<dyn Embedder<T>>,
    orchestrator: ExecOrchestrator,
    profiles: Vec<ModelProfile>,
    templates: PromptTemplates,
    config: ServiceConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    indexes: Mutex<HashMap<String, Arc<VectorIndex<T>>>>,
}

struct Turn {
    generation: Generation,
    raw_output: String,
    usage: Usage,
    error: Option<String>,
    history: Option<ChatHistory>,
}

impl<T: Scalar> SessionService<T> {
    pub fn new(
        store: SessionStore,
        specs: SpecRegistry,
        gateway: LlmGateway,
        embedder: Arc<dyn Embedder<T>>,
        orchestrator: ExecOrchestrator,
    ) -> Self {
        SessionService {
            store,
            specs,
            gateway,
            embedder,
            orchestrator,
            profiles: builtin_profiles(),
            templates: PromptTemplates::default(),
            config: ServiceConfig::default(),
            locks: Mutex::new(HashMap::new()),
            indexes: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_profiles(mut self, profiles: Vec<ModelProfile>) -> Self {
        self.profiles = profiles;
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_config(mut self, config: ServiceConfig) -> Self {
        self.config = config;
        self
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn specs(&self) -> &SpecRegistry {
        &self.specs
    }

    pub fn profiles(&self) -> &[ModelProfile] {
        &self.profiles
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn profile(&self, name: &str) -> Result<ModelProfile> {
        find_profile(&self.profiles, name)
            .cloned()
            .ok_or_else(|| SessionError::UnknownModel(name.to_string()))
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.to_string()).or_default().clone()
    }

    pub fn get(&self, id: &str) -> Result<Session> {
        self.store.load(id)
    }

    pub fn create(&self, new: NewSession) -> Result<Session> {
        if new.requirement.trim().is_empty() {
            return Err(SessionError::EmptyRequirement);
        }
        let spec = self.specs.get(&new.spec)?;
        let profile = self.profile(&new.model)?;
        let tokens = spec.simplified_tokens.unwrap_or(0);
        let mode = match new.mode {
            None => auto_mode(tokens, self.config.rag_threshold, &profile),
            Some(ContextMode::Full) if tokens >= profile.context_window => {
                tracing::warn!(
                    "simplified spec `{}` has {tokens} tokens and cannot fit {}; using retrieval",
                    spec.name,
                    profile.name
                );
                ContextMode::Rag
            }
            Some(m) => m,
        };
        let allowlist = self.orchestrator.allowlist()?;
        let system = self.templates.render_system_prompt(&self.templates.test_example, &allowlist)?;
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            spec: spec.name.clone(),
            requirement: new.requirement,
            setup: new.setup,
            prompt_level: new.prompt_level,
            mode,
            model: profile.name.clone(),
            history: ChatHistory::new(system)?,
            runs: Vec::new(),
            created_at: Utc::now(),
        };
        self.store.save(&session)?;
        Ok(session)
    }

    /// The retrieval index of a spec: cached, else loaded from the snapshot
    /// directory, else built (and saved when a directory is configured).
    pub fn index_for(&self, spec: &ApiSpecDoc) -> Result<Arc<VectorIndex<T>>> {
        if let Some(ix) = self.indexes.lock().get(&spec.name) {
            return Ok(ix.clone());
        }
        let snapshot = self.config.index_dir.as_ref().map(|d| d.join(format!("{}.json", spec.name)));
        let ix = match &snapshot {
            Some(p) if p.exists() => VectorIndex::load(p)?,
            _ => {
                let ix = build_index(spec, self.config.chunker, self.gateway.tokenizer(), &*self.embedder)?;
                if let Some(p) = &snapshot {
                    if let Some(dir) = p.parent() {
                        std::fs::create_dir_all(dir).map_err(|e| SessionError::Storage(e.to_string()))?;
                    }
                    ix.save(p)?;
                }
                ix
            }
        };
        let ix = Arc::new(ix);
        self.indexes.lock().insert(spec.name.clone(), ix.clone());
        Ok(ix)
    }

    fn api_context(&self, s: &Session, spec: &ApiSpecDoc, profile: &ModelProfile) -> Result<String> {
        match s.mode {
            ContextMode::Full => Ok(to_token_text(spec.effective())),
            ContextMode::Rag => {
                let index = self.index_for(spec)?;
                let qs = expand_requirement(&s.requirement, &self.gateway, profile, &self.templates, self.config.variants)?;
                let hits = retrieve_context(&qs, &index, self.config.top_k, &*self.embedder)?;
                Ok(join_context(&hits))
            }
        }
    }

    fn user_prompt(&self, s: &Session, spec: &ApiSpecDoc, profile: &ModelProfile) -> Result<String> {
        let setup = if s.setup.trim().is_empty() {
            &self.config.default_setup
        } else {
            &s.setup
        };
        let context = self.api_context(s, spec, profile)?;
        Ok(self.templates.render_user_prompt(&s.requirement, setup, &context)?)
    }

    /// One user turn and the model's reply on top of `base`.
    fn converse(&self, base: &ChatHistory, prompt: &str, profile: &ModelProfile) -> Result<Turn, GatewayError> {
        let asked = base
            .append_turn(Role::User, prompt)
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let (raw, usage) = self.gateway.chat_complete(&asked, profile)?;
        let history = asked
            .append_turn(Role::Assistant, raw.clone())
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        let (generation, error) = match parse_generation(&raw) {
            Ok(g) => (g, None),
            Err(e) => {
                tracing::warn!("model output does not follow the output format: {e}");
                let g = Generation {
                    test_text: raw.trim().to_string(),
                    code: extract_code_block(&raw),
                    ..Generation::default()
                };
                (g, Some(format!("output format: {e}")))
            }
        };
        Ok(Turn {
            generation,
            raw_output: raw,
            usage,
            error,
            history: Some(history),
        })
    }

    fn failed_turn(e: &GatewayError) -> Turn {
        tracing::warn!("model call failed: {e}");
        Turn {
            generation: Generation::default(),
            raw_output: String::new(),
            usage: Usage::default(),
            error: Some(format!("model call failed: {e}")),
            history: None,
        }
    }

    fn record(s: &Session, prompt: String, kind: AttemptKind, turn: &Turn) -> RunRecord {
        RunRecord {
            task_id: s.id.clone(),
            attempt_no: s.runs.len() as u32 + 1,
            prompt_level: s.prompt_level,
            kind,
            service: s.spec.clone(),
            mode: s.mode,
            model: s.model.clone(),
            prompt,
            raw_output: turn.raw_output.clone(),
            generation: turn.generation.clone(),
            report: None,
            label: None,
            usage: turn.usage,
            error: turn.error.clone(),
            created_at: Utc::now(),
        }
    }

    /// A generation from `base`, downgrading a full-spec session to
    /// retrieval when the prompt overflows the context window.
    fn generation_from(&self, s: &mut Session, base: &ChatHistory) -> Result<(String, Turn)> {
        let spec = self.specs.get(&s.spec)?;
        let profile = self.profile(&s.model)?;
        loop {
            let prompt = self.user_prompt(s, &spec, &profile)?;
            match self.converse(base, &prompt, &profile) {
                Ok(turn) => return Ok((prompt, turn)),
                Err(GatewayError::ContextOverflow { required, window, .. }) if s.mode == ContextMode::Full => {
                    tracing::warn!("prompt needs {required} tokens, window is {window}; switching session {} to retrieval", s.id);
                    s.mode = ContextMode::Rag;
                }
                Err(e) => return Ok((prompt, Self::failed_turn(&e))),
            }
        }
    }

    pub fn generate(&self, id: &str) -> Result<RunRecord> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.store.load(id)?;
        let base = s.history.clone();
        let (prompt, turn) = self.generation_from(&mut s, &base)?;
        let run = Self::record(&s, prompt, AttemptKind::Generate, &turn);
        if let Some(h) = turn.history {
            s.history = h;
        }
        s.runs.push(run.clone());
        self.store.save(&s)?;
        Ok(run)
    }

    /// Run an attempt's script. `code` replaces the attempt's script first,
    /// as when an operator edits it.
    pub fn execute(&self, id: &str, attempt: u32, code: Option<String>) -> Result<ExecuteResult> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.store.load(id)?;
        let run = s.run_mut(attempt)?;
        if let Some(c) = code {
            run.generation.code = Some(c);
        }
        let report = match run.generation.code.as_deref().filter(|c| !c.trim().is_empty()) {
            Some(c) => self.orchestrator.execute(c)?,
            None => ExecutionReport::error(vec!["the generation contains no test code".into()], 0.0),
        };
        run.report = Some(report);
        let run = run.clone();
        self.store.save(&s)?;
        Ok(ExecuteResult {
            suggested_label: suggest_label(&run),
            run,
        })
    }

    /// Continue the conversation with the latest error log and an optional
    /// instruction.
    pub fn refactor(&self, id: &str, instruction: &str) -> Result<RunRecord> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.store.load(id)?;
        let last = s.runs.last().ok_or_else(|| SessionError::NothingToRefactor(id.to_string()))?;
        let log = match &last.report {
            Some(r) => r.error_log(),
            None => NOT_EXECUTED_LOG.to_string(),
        };
        let log = if log.trim().is_empty() { NOT_EXECUTED_LOG.to_string() } else { log };
        let prompt = self.templates.render_refactor_prompt(&log, instruction)?;
        let profile = self.profile(&s.model)?;
        let turn = self
            .converse(&s.history, &prompt, &profile)
            .unwrap_or_else(|e| Self::failed_turn(&e));
        let run = Self::record(&s, prompt, AttemptKind::Refactor, &turn);
        if let Some(h) = turn.history {
            s.history = h;
        }
        s.runs.push(run.clone());
        self.store.save(&s)?;
        Ok(run)
    }

    /// `attempts` independent generations from the same inputs, each on a
    /// fresh history. The session keeps the last successful branch as its
    /// history so a refactor continues from it.
    pub fn run_tree(&self, new: NewSession, attempts: u32) -> Result<(Session, Vec<RunRecord>)> {
        if attempts == 0 {
            return Err(SessionError::NoAttempts);
        }
        let created = self.create(new)?;
        let lock = self.lock(&created.id);
        let _guard = lock.lock();
        let mut s = created;
        let root = s.history.clone();
        let mut runs = Vec::new();
        for _ in 0..attempts {
            let (prompt, turn) = self.generation_from(&mut s, &root)?;
            let run = Self::record(&s, prompt, AttemptKind::Generate, &turn);
            if let Some(h) = turn.history {
                s.history = h;
            }
            s.runs.push(run.clone());
            runs.push(run);
            self.store.save(&s)?;
        }
        Ok((s, runs))
    }

    pub fn annotate(&self, id: &str, attempt: u32, label: ErrorLabel, level: PromptLevel) -> Result<RunRecord> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.store.load(id)?;
        let run = s.run_mut(attempt)?;
        run.label = Some(label);
        run.prompt_level = Some(level);
        let run = run.clone();
        self.store.save(&s)?;
        Ok(run)
    }

    /// valid@k over every stored run that is either passing or labelled.
    pub fn metrics<M: Scalar>(&self, ks: &[u64]) -> Result<MetricsReport<M>> {
        metrics_for_dir(&self.store.runs_dir(), ks, &self.profiles)
    }
}
