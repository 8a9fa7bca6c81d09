mod config;

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use testgenie_core::evaluation::{render_table, ContextMode, ErrorKind, ErrorLabel, RunRecord, SemanticSub};
use testgenie_core::exec_orchestrator::ExecOrchestrator;
use testgenie_core::llm_gateway::{ChatProvider, Embedder, FixtureProvider, HashingEmbedder, LlmGateway, OpenAiCompatClient};
use testgenie_core::prompt_forge::{PromptLevel, PromptTemplates};
use testgenie_core::rag_index::{build_index, ChunkerConfig};
use testgenie_core::session::{metrics_for_dir, NewSession, ServiceConfig, SessionService, SessionStore, SpecRegistry};
use testgenie_core::spec_ingest::{distill, fetch_spec, to_pretty, ApiSpecDoc, TokenizerHandle};
use testgenie_core::{Service, ServiceMetrics};

use config::{require_dir, CliConfig, FileConfig, Overrides};

/// Dimension of the offline embedder used with `--mock`.
const MOCK_EMBED_DIM: usize = 256;

#[derive(Parser, Debug)]
#[command(name = "testgenie", version, about = "Generate, run and triage API tests from OpenAPI specs with an LLM")]
struct Cli {
    /// Print one JSON document on stdout instead of text
    #[arg(long, global = true)]
    json: bool,
    /// Config file (default ./testgenie.toml when present)
    #[arg(long, global = true, env = "TESTGENIE_CONFIG")]
    config: Option<PathBuf>,
    /// OpenAI-compatible endpoint
    #[arg(long, global = true, env = "TESTGENIE_BASE_URL")]
    base_url: Option<String>,
    /// Name of the environment variable that holds the API key
    #[arg(long, global = true, env = "TESTGENIE_API_KEY_ENV")]
    api_key_env: Option<String>,
    #[arg(long, global = true, env = "TESTGENIE_MODEL")]
    model: Option<String>,
    /// auto, exact or approximate
    #[arg(long, global = true, env = "TESTGENIE_TOKENIZER")]
    tokenizer: Option<String>,
    /// cl100k_base vocabulary file for exact counts
    #[arg(long, global = true, env = "TESTGENIE_VOCABULARY")]
    vocabulary: Option<PathBuf>,
    /// Test project the generated scripts run in
    #[arg(long, global = true, env = "TESTGENIE_SANDBOX")]
    sandbox: Option<PathBuf>,
    /// Where sessions and run logs are stored
    #[arg(long, global = true, env = "TESTGENIE_STATE")]
    state: Option<PathBuf>,
    /// Directory of registered specs
    #[arg(long, global = true, env = "TESTGENIE_SPECS")]
    specs: Option<PathBuf>,
    /// Serve LLM replies from this fixture directory instead of the network
    #[arg(long, global = true, env = "TESTGENIE_MOCK")]
    mock: Option<PathBuf>,
    /// Directory overriding the prompt templates
    #[arg(long, global = true, env = "TESTGENIE_TEMPLATES")]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simplify a spec and report token counts
    Distill {
        /// File path or URL
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chunk and embed a spec into a retrieval index
    Index {
        /// Registered name, file path or URL
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = ChunkerConfig::default().min_tokens)]
        min_tokens: usize,
        #[arg(long, default_value_t = ChunkerConfig::default().max_tokens)]
        max_tokens: usize,
    },
    /// Generate a test for a requirement
    Generate(GenerateArgs),
    /// Run an attempt's test in the sandbox
    Execute {
        #[arg(long)]
        session: String,
        #[arg(long)]
        attempt: u32,
        /// Run this file instead of the generated code
        #[arg(long)]
        code: Option<PathBuf>,
    },
    /// Ask for a corrected test from the last attempt's error log
    Refactor {
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "")]
        instruction: String,
    },
    /// Label an attempt
    Annotate {
        #[arg(long)]
        session: String,
        #[arg(long)]
        attempt: u32,
        /// Syntax, Semantic, NoTest, Permission or Defect
        #[arg(long)]
        label: String,
        /// Hallucination, ApiOutdated or Other (Semantic only)
        #[arg(long)]
        semantic_sub: Option<String>,
        #[arg(long)]
        level: String,
    },
    /// valid@k over stored run logs
    Metrics {
        /// Run log directory (default: the state's runs)
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, default_value = "1,2,3")]
        k: String,
    },
    /// Serve the HTTP API and, optionally, the console
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Registered name, file path or URL; required for a new session
    #[arg(long, required_unless_present = "session")]
    spec: Option<String>,
    #[arg(long, conflicts_with = "requirement_file")]
    requirement: Option<String>,
    #[arg(long)]
    requirement_file: Option<PathBuf>,
    /// Add an attempt to an existing session
    #[arg(long, conflicts_with_all = ["spec", "attempts"])]
    session: Option<String>,
    /// full or rag; chosen from the spec size when omitted
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    level: Option<String>,
    #[arg(long, default_value = "")]
    setup: String,
    /// Independent attempts from fresh histories
    #[arg(long, default_value_t = 1)]
    attempts: u32,
    /// Also run each generated test
    #[arg(long)]
    execute: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let json_mode = cli.json;
    match run(cli) {
        Ok(out) => {
            emit(json_mode, &out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json_mode {
                emit_json(&json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// What a command reports: a JSON document and its text rendering.
struct Output {
    json: Value,
    text: String,
}

impl Output {
    fn new(value: impl Serialize, text: impl Into<String>) -> Result<Self> {
        Ok(Output {
            json: serde_json::to_value(value)?,
            text: text.into(),
        })
    }
}

fn emit(json_mode: bool, out: &Output) {
    if json_mode {
        emit_json(&out.json);
    } else {
        let mut stdout = std::io::stdout().lock();
        let _ = write!(stdout, "{}", out.text);
        if !out.text.ends_with('\n') && !out.text.is_empty() {
            let _ = writeln!(stdout);
        }
    }
}

fn emit_json(v: &Value) {
    let text = serde_json::to_string_pretty(v).unwrap_or_else(|_| "null".into());
    // A closed pipe is the reader's choice, not a failure.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<Output> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let cfg = CliConfig::resolve(
        Overrides {
            base_url: cli.base_url,
            api_key_env: cli.api_key_env,
            model: cli.model,
            tokenizer: cli.tokenizer,
            vocabulary: cli.vocabulary,
            sandbox: cli.sandbox,
            state: cli.state,
            specs: cli.specs,
            mock: cli.mock,
            templates: cli.templates,
        },
        file,
    )?;
    match cli.command {
        Command::Distill { spec, out } => cmd_distill(&cfg, &spec, out.as_deref()),
        Command::Index {
            spec,
            out,
            min_tokens,
            max_tokens,
        } => cmd_index(&cfg, &spec, out, ChunkerConfig::new(min_tokens, max_tokens)?),
        Command::Generate(args) => cmd_generate(&cfg, args),
        Command::Execute { session, attempt, code } => {
            let code = match code {
                Some(p) => Some(std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let svc = build_service(&cfg, None)?;
            let r = svc.execute(&session, attempt, code)?;
            let mut text = run_line(&r.run);
            if let Some(l) = &r.suggested_label {
                text.push_str(&format!("suggested label: {}\n", label_text(l)));
            }
            Output::new(&r, text)
        }
        Command::Refactor { session, instruction } => {
            let svc = build_service(&cfg, None)?;
            let r = svc.refactor(&session, &instruction)?;
            Output::new(&r, run_line(&r))
        }
        Command::Annotate {
            session,
            attempt,
            label,
            semantic_sub,
            level,
        } => {
            let kind: ErrorKind = label.parse().map_err(anyhow::Error::msg)?;
            let sub = semantic_sub
                .map(|s| s.parse::<SemanticSub>().map_err(anyhow::Error::msg))
                .transpose()?;
            let label = ErrorLabel::new(kind, sub)?;
            let level: PromptLevel = level.parse()?;
            let svc = build_service(&cfg, None)?;
            let r = svc.annotate(&session, attempt, label, level)?;
            Output::new(&r, run_line(&r))
        }
        Command::Metrics { runs, k } => {
            let ks = parse_ks(&k)?;
            let dir = runs.unwrap_or_else(|| SessionStore::new(&cfg.state).runs_dir());
            require_dir("runs", &dir)?;
            let report: ServiceMetrics = metrics_for_dir(&dir, &ks, &cfg.profiles)?;
            let mut text = render_table(&report.summary);
            if report.pending_triage > 0 {
                text.push_str(&format!("{} failing runs await a label\n", report.pending_triage));
            }
            Output::new(&report, text)
        }
        Command::Serve { addr, static_dir } => cmd_serve(&cfg, addr, static_dir),
    }
}

fn parse_ks(text: &str) -> Result<Vec<u64>> {
    testgenie_service::parse_ks(text).map_err(anyhow::Error::msg)
}

fn is_source(spec: &str) -> bool {
    spec.starts_with("http://") || spec.starts_with("https://") || Path::new(spec).is_file()
}

/// A spec given as a path or URL, or looked up among the registered ones.
fn resolve_spec(cfg: &CliConfig, spec: &str, tok: &TokenizerHandle) -> Result<ApiSpecDoc> {
    if is_source(spec) {
        return Ok(distill(&fetch_spec(spec)?, tok));
    }
    require_dir("specs", &cfg.specs)?;
    let registry = SpecRegistry::load_dir(&cfg.specs, tok)?;
    Ok((*registry.get(spec)?).clone())
}

fn cmd_distill(cfg: &CliConfig, spec: &str, out: Option<&Path>) -> Result<Output> {
    let tok = cfg.tokenizer()?;
    let doc = distill(&fetch_spec(spec)?, &tok);
    if let Some(out) = out {
        let mut text = to_pretty(doc.effective());
        text.push('\n');
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    let original = doc.original_tokens.unwrap_or(0);
    let simplified = doc.simplified_tokens.unwrap_or(0);
    let text = format!(
        "{}: {original} tokens original, {simplified} tokens simplified ({} count)\n",
        doc.name,
        tok.kind()
    );
    Output::new(
        json!({
            "name": doc.name,
            "source": doc.source,
            "original_tokens": original,
            "simplified_tokens": simplified,
            "tokenizer": tok.kind(),
            "out": out,
        }),
        text,
    )
}

type Backends = (Arc<dyn ChatProvider>, Arc<dyn Embedder<f32>>);

fn chat_and_embedder(cfg: &CliConfig) -> Result<Backends> {
    if let Some(dir) = &cfg.mock {
        require_dir("mock", dir)?;
        return Ok((Arc::new(FixtureProvider::new(dir)), Arc::new(HashingEmbedder::new(MOCK_EMBED_DIM))));
    }
    let key = cfg.api_key();
    if key.is_none() {
        tracing::warn!("{} is not set; calling {} without a key", cfg.api_key_env, cfg.base_url);
    }
    let client = Arc::new(OpenAiCompatClient::new(&cfg.base_url, key)?);
    Ok((client.clone(), client))
}

fn cmd_index(cfg: &CliConfig, spec: &str, out: Option<PathBuf>, chunker: ChunkerConfig) -> Result<Output> {
    let tok = cfg.tokenizer()?;
    let doc = resolve_spec(cfg, spec, &tok)?;
    let (_, embedder) = chat_and_embedder(cfg)?;
    let index = build_index(&doc, chunker, &tok, &*embedder)?;
    let path = match out {
        Some(p) => p,
        None => cfg
            .index_dir
            .clone()
            .unwrap_or_else(|| cfg.state.join("indexes"))
            .join(format!("{}.json", doc.name)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    index.save(&path)?;
    let largest = index.chunks().iter().map(|c| c.token_len).max().unwrap_or(0);
    let text = format!(
        "{}: {} chunks, dimension {}, largest chunk {largest} tokens, written to {}\n",
        doc.name,
        index.chunks().len(),
        index.dim(),
        path.display()
    );
    Output::new(
        json!({
            "spec": doc.name,
            "chunks": index.chunks().len(),
            "dim": index.dim(),
            "largest_chunk_tokens": largest,
            "out": path,
        }),
        text,
    )
}

fn build_service(cfg: &CliConfig, extra: Option<ApiSpecDoc>) -> Result<Service> {
    let tok = cfg.tokenizer()?;
    let mut specs = if cfg.specs.is_dir() {
        SpecRegistry::load_dir(&cfg.specs, &tok)?
    } else {
        SpecRegistry::new()
    };
    if let Some(doc) = extra {
        specs.insert(doc, &tok);
    }
    require_dir("sandbox", &cfg.sandbox)?;
    let (chat, embedder) = chat_and_embedder(cfg)?;
    let templates = match &cfg.templates {
        Some(dir) => {
            require_dir("templates", dir)?;
            PromptTemplates::from_dir(dir)?
        }
        None => PromptTemplates::default(),
    };
    let defaults = ServiceConfig::default();
    let config = ServiceConfig {
        rag_threshold: cfg.rag_threshold.unwrap_or(defaults.rag_threshold),
        top_k: cfg.top_k.unwrap_or(defaults.top_k),
        variants: cfg.variants.unwrap_or(defaults.variants),
        index_dir: cfg.index_dir.clone(),
        ..defaults
    };
    Ok(SessionService::new(
        SessionStore::new(&cfg.state),
        specs,
        LlmGateway::new(chat, tok),
        embedder,
        ExecOrchestrator::new(&cfg.sandbox, cfg.runner.clone()),
    )
    .with_profiles(cfg.profiles.clone())
    .with_templates(templates)
    .with_config(config))
}

fn cmd_generate(cfg: &CliConfig, a: GenerateArgs) -> Result<Output> {
    let requirement = match (&a.requirement, &a.requirement_file) {
        (Some(r), _) => Some(r.clone()),
        (None, Some(p)) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        (None, None) => None,
    };
    let (svc, session_id, mut runs) = if let Some(id) = a.session {
        if requirement.is_some() {
            bail!("--requirement cannot change an existing session");
        }
        let svc = build_service(cfg, None)?;
        let run = svc.generate(&id)?;
        (svc, id, vec![run])
    } else {
        let spec = a.spec.context("--spec is required for a new session")?;
        let requirement = requirement.context("--requirement or --requirement-file is required")?;
        let (extra, name) = if is_source(&spec) {
            let doc = fetch_spec(&spec)?;
            let name = doc.name.clone();
            (Some(doc), name)
        } else {
            (None, spec)
        };
        let svc = build_service(cfg, extra)?;
        let mode = a.mode.as_deref().map(str::parse::<ContextMode>).transpose().map_err(anyhow::Error::msg)?;
        let prompt_level = a.level.as_deref().map(str::parse::<PromptLevel>).transpose()?;
        let new = NewSession {
            spec: name,
            requirement,
            setup: a.setup,
            mode,
            model: cfg.model.clone(),
            prompt_level,
        };
        if a.attempts > 1 {
            let (s, runs) = svc.run_tree(new, a.attempts)?;
            (svc, s.id, runs)
        } else {
            let s = svc.create(new)?;
            let run = svc.generate(&s.id)?;
            (svc, s.id, vec![run])
        }
    };
    if a.execute {
        for r in runs.iter_mut() {
            if r.generation.has_code() {
                *r = svc.execute(&session_id, r.attempt_no, None)?.run;
            }
        }
    }
    let session = svc.get(&session_id)?;
    let runs_dir = svc.store().runs_dir();
    let files: Vec<PathBuf> = runs
        .iter()
        .map(|r| runs_dir.join(&r.task_id).join(format!("{}.json", r.attempt_no)))
        .collect();
    let mut text = format!("session {session_id} ({}, {})\n", mode_text(session.mode), session.model);
    for (r, f) in runs.iter().zip(&files) {
        text.push_str(&run_line(r));
        text.push_str(&format!("  run log: {}\n", f.display()));
    }
    Output::new(json!({ "session": session, "runs": runs, "run_files": files }), text)
}

fn mode_text(m: ContextMode) -> &'static str {
    match m {
        ContextMode::Full => "Full",
        ContextMode::Rag => "RAG",
    }
}

fn label_text(l: &ErrorLabel) -> String {
    match l.semantic_sub() {
        Some(sub) => format!("{:?}/{sub:?}", l.kind()),
        None => format!("{:?}", l.kind()),
    }
}

fn run_line(r: &RunRecord) -> String {
    let mut s = format!(
        "attempt {} ({:?}): {} tokens in, {} tokens out",
        r.attempt_no, r.kind, r.usage.input_tokens, r.usage.output_tokens
    );
    if let Some(rep) = &r.report {
        s.push_str(&format!(", {} {}/{} passed", rep.outcome, rep.passed, rep.total));
    } else if r.generation.has_code() {
        s.push_str(", not executed");
    } else {
        s.push_str(", no test code");
    }
    if let Some(l) = &r.label {
        s.push_str(&format!(", label {}", label_text(l)));
    }
    if let Some(e) = &r.error {
        s.push_str(&format!(", error: {e}"));
    }
    s.push('\n');
    s
}

fn cmd_serve(cfg: &CliConfig, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<Output> {
    if let Some(d) = &static_dir {
        require_dir("static", d)?;
    }
    // The blocking HTTP client inside must be built and dropped outside the runtime.
    let svc = Arc::new(build_service(cfg, None)?);
    let app = testgenie_service::router(svc.clone(), static_dir);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let server = testgenie_service::serve(addr, app);
        tokio::select! {
            r = server => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    drop(rt);
    drop(svc);
    Output::new(json!({ "stopped": addr.to_string() }), "stopped\n")
}
