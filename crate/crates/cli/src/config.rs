//! Settings resolved from flags, then environment, then `testgenie.toml`.
//! Clap merges the first two; the file only fills what both left empty.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use testgenie_core::exec_orchestrator::RunnerConfig;
use testgenie_core::llm_gateway::{builtin_profiles, ModelProfile};
use testgenie_core::spec_ingest::TokenizerHandle;

pub const DEFAULT_CONFIG: &str = "testgenie.toml";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4-turbo";

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub tokenizer: Option<String>,
    pub vocabulary: Option<PathBuf>,
    pub sandbox: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub specs: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub rag_threshold: Option<usize>,
    pub top_k: Option<usize>,
    pub variants: Option<usize>,
    pub runner: Option<RunnerConfig>,
    #[serde(default)]
    pub profiles: Vec<ModelProfile>,
}

impl FileConfig {
    /// An explicit path must exist; the default one is optional.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let (path, required) = match explicit {
            Some(p) => (p.to_path_buf(), true),
            None => (PathBuf::from(DEFAULT_CONFIG), false),
        };
        if !path.exists() {
            if required {
                bail!("config file {} not found", path.display());
            }
            return Ok(FileConfig::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in [
            &mut cfg.vocabulary,
            &mut cfg.sandbox,
            &mut cfg.state,
            &mut cfg.specs,
            &mut cfg.mock,
            &mut cfg.templates,
            &mut cfg.index_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Command-line and environment values; `None` means neither was given.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub tokenizer: Option<String>,
    pub vocabulary: Option<PathBuf>,
    pub sandbox: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub specs: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub base_url: String,
    /// Name of the variable holding the key; the key itself is read late
    /// and never stored here.
    pub api_key_env: String,
    pub model: String,
    pub tokenizer: String,
    pub vocabulary: Option<PathBuf>,
    pub sandbox: PathBuf,
    pub state: PathBuf,
    pub specs: PathBuf,
    pub mock: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub rag_threshold: Option<usize>,
    pub top_k: Option<usize>,
    pub variants: Option<usize>,
    pub runner: RunnerConfig,
    pub profiles: Vec<ModelProfile>,
}

impl CliConfig {
    pub fn resolve(o: Overrides, f: FileConfig) -> Result<Self> {
        let mut profiles = builtin_profiles();
        for p in f.profiles {
            p.validate()?;
            match profiles.iter_mut().find(|q| q.name == p.name) {
                Some(q) => *q = p,
                None => profiles.push(p),
            }
        }
        let state = o.state.or(f.state).unwrap_or_else(|| PathBuf::from("state"));
        Ok(CliConfig {
            base_url: o.base_url.or(f.base_url).unwrap_or_else(|| DEFAULT_BASE_URL.into()),
            api_key_env: o.api_key_env.or(f.api_key_env).unwrap_or_else(|| DEFAULT_API_KEY_ENV.into()),
            model: o.model.or(f.model).unwrap_or_else(|| DEFAULT_MODEL.into()),
            tokenizer: o.tokenizer.or(f.tokenizer).unwrap_or_else(|| "auto".into()),
            vocabulary: o.vocabulary.or(f.vocabulary),
            sandbox: o.sandbox.or(f.sandbox).unwrap_or_else(|| PathBuf::from("sandbox")),
            specs: o.specs.or(f.specs).unwrap_or_else(|| PathBuf::from("specs")),
            mock: o.mock.or(f.mock),
            templates: o.templates.or(f.templates),
            index_dir: f.index_dir.or_else(|| Some(state.join("indexes"))),
            rag_threshold: f.rag_threshold,
            top_k: f.top_k,
            variants: f.variants,
            runner: f.runner.unwrap_or_default(),
            profiles,
            state,
        })
    }

    pub fn tokenizer(&self) -> Result<TokenizerHandle> {
        match self.tokenizer.to_ascii_lowercase().as_str() {
            "auto" => Ok(TokenizerHandle::auto(self.vocabulary.as_deref())),
            "approximate" | "approx" => Ok(TokenizerHandle::approximate()),
            "exact" => {
                let path = self
                    .vocabulary
                    .clone()
                    .unwrap_or_else(testgenie_core::spec_ingest::default_vocabulary_path);
                Ok(TokenizerHandle::exact_from_file(path)?)
            }
            other => bail!("unknown tokenizer mode `{other}` (expected auto, exact or approximate)"),
        }
    }

    /// The key from the configured variable, if set. Never printed.
    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }
}

pub fn require_dir(what: &str, p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!("{what} directory {} does not exist", p.display());
    }
    Ok(())
}
