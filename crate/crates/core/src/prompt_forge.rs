//! Prompt templates and chat history.
//!
//! Templates are plain UTF-8 files with `{{name}}` placeholders. The built-in
//! set is compiled in from `prompts/`; a directory with the same file names
//! overrides any of them.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SYSTEM_TEMPLATE: &str = include_str!("../prompts/system.txt");
pub const USER_TEMPLATE: &str = include_str!("../prompts/user.txt");
pub const REFACTOR_TEMPLATE: &str = include_str!("../prompts/refactor.txt");
pub const EXPANSION_TEMPLATE: &str = include_str!("../prompts/expansion.txt");
pub const DEFAULT_TEST_EXAMPLE: &str = include_str!("../prompts/test_example.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template does not contain placeholder `{{{{{0}}}}}`")]
    MissingPlaceholder(String),
    #[error("placeholder `{{{{{0}}}}}` has no value")]
    UnresolvedPlaceholder(String),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("invalid environment variable name `{0}`")]
    InvalidEnvName(String),
    #[error("malformed environment variable line `{0}`")]
    MalformedEnvLine(String),
    #[error("turn content must not be empty")]
    EmptyTurn,
    #[error("a {attempted} turn cannot follow {after}")]
    Alternation { attempted: Role, after: String },
    #[error("unknown prompt level `{0}`")]
    UnknownLevel(String),
    #[error("cannot read template {path}: {reason}")]
    TemplateIo { path: String, reason: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("static regex"))
}

/// Names of all placeholders in a template, in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    placeholder_re()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .filter(|n| seen.insert(n.clone()))
        .collect()
}

/// Single-pass substitution: values are never rescanned for placeholders.
///
/// Every `required` name must occur in the template and every placeholder in
/// the template must have a value.
pub fn render(template: &str, values: &[(&str, &str)], required: &[&str]) -> Result<String, PromptError> {
    let present = placeholders(template);
    if let Some(missing) = required.iter().find(|r| !present.iter().any(|p| p == *r)) {
        return Err(PromptError::MissingPlaceholder(missing.to_string()));
    }
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut last = 0;
    for cap in placeholder_re().captures_iter(template) {
        let whole = cap.get(0).expect("group 0 always matches");
        let name = &cap[1];
        let value = values
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// An environment variable the generated test may read, with its meaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvVarDescriptor {
    pub name: String,
    pub description: String,
}

fn env_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Z][A-Z0-9_]*$").expect("static regex"))
}

impl EnvVarDescriptor {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Result<Self, PromptError> {
        let name = name.into();
        if !env_name_re().is_match(&name) {
            return Err(PromptError::InvalidEnvName(name));
        }
        Ok(EnvVarDescriptor {
            name,
            description: description.into(),
        })
    }

    /// Parse a `NAME: description` line.
    pub fn parse_line(line: &str) -> Result<Self, PromptError> {
        let (name, desc) = line
            .split_once(':')
            .ok_or_else(|| PromptError::MalformedEnvLine(line.to_string()))?;
        Self::new(name.trim(), desc.trim())
    }

    /// Parse an allowlist file body; blank lines and `#` comments are skipped.
    pub fn parse_list(text: &str) -> Result<Vec<Self>, PromptError> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(Self::parse_line)
            .collect()
    }
}

impl fmt::Display for EnvVarDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.description)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

/// System turn first, then strictly alternating user and assistant turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChatTurn>", into = "Vec<ChatTurn>")]
pub struct ChatHistory {
    turns: Vec<ChatTurn>,
}

impl ChatHistory {
    pub fn new(system_prompt: impl Into<String>) -> Result<Self, PromptError> {
        ChatHistory::default().append_turn(Role::System, system_prompt)
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn last_role(&self) -> Option<Role> {
        self.turns.last().map(|t| t.role)
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.turns.first().map(|t| t.content.as_str())
    }

    fn expected_next(&self) -> Role {
        match self.last_role() {
            None => Role::System,
            Some(Role::System) | Some(Role::Assistant) => Role::User,
            Some(Role::User) => Role::Assistant,
        }
    }

    /// Returns a new history with the turn appended; `self` is unchanged.
    pub fn append_turn(&self, role: Role, content: impl Into<String>) -> Result<ChatHistory, PromptError> {
        let content = content.into();
        if content.is_empty() {
            return Err(PromptError::EmptyTurn);
        }
        if role != self.expected_next() {
            return Err(PromptError::Alternation {
                attempted: role,
                after: self
                    .last_role()
                    .map(|r| format!("a {r} turn"))
                    .unwrap_or_else(|| "an empty history".to_string()),
            });
        }
        let mut turns = self.turns.clone();
        turns.push(ChatTurn { role, content });
        Ok(ChatHistory { turns })
    }

    /// `{"system_prompt": ..., "interactions": [{"user_prompt", "generation"}]}`
    pub fn to_transcript(&self) -> serde_json::Value {
        let mut interactions = Vec::new();
        let mut rest = self.turns.iter().skip(1);
        while let Some(user) = rest.next() {
            let generation = rest.next().map(|t| t.content.as_str());
            interactions.push(serde_json::json!({
                "user_prompt": user.content,
                "generation": generation,
            }));
        }
        serde_json::json!({
            "system_prompt": self.system_prompt(),
            "interactions": interactions,
        })
    }
}

impl TryFrom<Vec<ChatTurn>> for ChatHistory {
    type Error = PromptError;

    fn try_from(turns: Vec<ChatTurn>) -> Result<Self, Self::Error> {
        turns
            .into_iter()
            .try_fold(ChatHistory::default(), |h, t| h.append_turn(t.role, t.content))
    }
}

impl From<ChatHistory> for Vec<ChatTurn> {
    fn from(h: ChatHistory) -> Self {
        h.turns
    }
}

/// Detail level of a business requirement, declared by the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptLevel {
    L1,
    L2,
    L3,
}

impl PromptLevel {
    pub const ALL: [PromptLevel; 3] = [PromptLevel::L1, PromptLevel::L2, PromptLevel::L3];
}

impl fmt::Display for PromptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptLevel::L1 => "L1",
            PromptLevel::L2 => "L2",
            PromptLevel::L3 => "L3",
        })
    }
}

impl FromStr for PromptLevel {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L1" | "1" => Ok(PromptLevel::L1),
            "L2" | "2" => Ok(PromptLevel::L2),
            "L3" | "3" => Ok(PromptLevel::L3),
            _ => Err(PromptError::UnknownLevel(s.to_string())),
        }
    }
}

/// The template set used by the generation, refactoring and expansion flows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub system: String,
    pub user: String,
    pub refactor: String,
    pub expansion: String,
    pub test_example: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            system: SYSTEM_TEMPLATE.to_string(),
            user: USER_TEMPLATE.to_string(),
            refactor: REFACTOR_TEMPLATE.to_string(),
            expansion: EXPANSION_TEMPLATE.to_string(),
            test_example: DEFAULT_TEST_EXAMPLE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates overridden by any of `system.txt`, `user.txt`,
    /// `refactor.txt`, `expansion.txt`, `test_example.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = PromptTemplates::default();
        for (file, slot) in [
            ("system.txt", &mut t.system),
            ("user.txt", &mut t.user),
            ("refactor.txt", &mut t.refactor),
            ("expansion.txt", &mut t.expansion),
            ("test_example.txt", &mut t.test_example),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateIo {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            }
        }
        Ok(t)
    }

    pub fn render_system_prompt(&self, test_example: &str, env_vars: &[EnvVarDescriptor]) -> Result<String, PromptError> {
        render_system_prompt(&self.system, test_example, env_vars)
    }

    pub fn render_user_prompt(&self, requirement: &str, setup: &str, api_context: &str) -> Result<String, PromptError> {
        render_user_prompt(&self.user, requirement, setup, api_context)
    }

    pub fn render_refactor_prompt(&self, error_log: &str, instruction: &str) -> Result<String, PromptError> {
        render_refactor_prompt(&self.refactor, error_log, instruction)
    }

    pub fn render_expansion_prompt(&self, count: usize) -> Result<String, PromptError> {
        render(&self.expansion, &[("count", &count.to_string())], &["count"])
    }
}

pub fn render_system_prompt(
    template: &str,
    test_example: &str,
    env_vars: &[EnvVarDescriptor],
) -> Result<String, PromptError> {
    if test_example.trim().is_empty() {
        return Err(PromptError::EmptyInput("test example"));
    }
    let env = env_vars.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
    render(
        template,
        &[("test_example", test_example.trim_end_matches('\n')), ("env_description", &env)],
        &["test_example", "env_description"],
    )
}

pub fn render_user_prompt(
    template: &str,
    requirement: &str,
    setup_instructions: &str,
    api_context: &str,
) -> Result<String, PromptError> {
    if requirement.trim().is_empty() {
        return Err(PromptError::EmptyInput("requirement"));
    }
    if api_context.trim().is_empty() {
        return Err(PromptError::EmptyInput("API context"));
    }
    render(
        template,
        &[
            ("user_story", requirement),
            ("setup_instructions", setup_instructions),
            ("api_specification", api_context),
        ],
        &["user_story", "setup_instructions", "api_specification"],
    )
}

pub fn render_refactor_prompt(template: &str, error_log: &str, user_instruction: &str) -> Result<String, PromptError> {
    if error_log.trim().is_empty() {
        return Err(PromptError::EmptyInput("error log"));
    }
    render(
        template,
        &[("error", error_log), ("user_instruction", user_instruction)],
        &["error", "user_instruction"],
    )
}
