//! OpenAPI document ingestion: fetch from file or URL, canonicalize to JSON,
//! strip inline images and admin/deprecated resources, account tokens.

mod json_text;
mod tokenizer;

use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use json_text::{to_pretty, to_token_text};
pub use tokenizer::{default_vocabulary_path, TokenizerError, TokenizerHandle, TokenizerKind, VOCABULARY_ENV};

const HTTP_METHODS: [&str; 8] = ["get", "put", "post", "delete", "options", "head", "patch", "trace"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read specification from {source_location}: {reason}")]
    Unreachable { source_location: String, reason: String },
    #[error("cannot parse specification {source_location} at line {line}, column {column}: {reason}")]
    Unparseable {
        source_location: String,
        line: usize,
        column: usize,
        reason: String,
    },
}

/// An OpenAPI document, its simplified form, and token counts of both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSpecDoc {
    pub name: String,
    pub source: String,
    pub raw: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simplified: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simplified_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mode: Option<TokenizerKind>,
}

impl ApiSpecDoc {
    pub fn from_value(name: impl Into<String>, source: impl Into<String>, raw: Value) -> Self {
        ApiSpecDoc {
            name: name.into(),
            source: source.into(),
            raw,
            simplified: None,
            original_tokens: None,
            simplified_tokens: None,
            token_mode: None,
        }
    }

    /// The simplified tree, or the raw one if simplification has not run.
    pub fn effective(&self) -> &Value {
        self.simplified.as_ref().unwrap_or(&self.raw)
    }

    /// Set of `(path, method)` pairs in a document.
    pub fn operations(doc: &Value) -> Vec<(String, String)> {
        let mut ops = Vec::new();
        if let Some(paths) = doc.get("paths").and_then(Value::as_object) {
            for (path, item) in paths {
                if let Some(item) = item.as_object() {
                    for method in item.keys().filter(|k| is_method(k)) {
                        ops.push((path.clone(), method.to_ascii_lowercase()));
                    }
                }
            }
        }
        ops
    }
}

/// Read a JSON or YAML document from a local path or an http(s) URL.
pub fn fetch_spec(source: &str) -> Result<ApiSpecDoc, IngestError> {
    let text = if is_url(source) {
        fetch_url(source)?
    } else {
        std::fs::read_to_string(source).map_err(|e| IngestError::Unreachable {
            source_location: source.to_string(),
            reason: e.to_string(),
        })?
    };
    let raw = parse_document(source, &text)?;
    Ok(ApiSpecDoc::from_value(name_from_source(source), source, raw))
}

fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

fn fetch_url(url: &str) -> Result<String, IngestError> {
    let unreachable = |reason: String| IngestError::Unreachable {
        source_location: url.to_string(),
        reason,
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| unreachable(e.to_string()))?;
    let resp = client.get(url).send().map_err(|e| unreachable(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        return Err(unreachable(format!("HTTP status {status}")));
    }
    resp.text().map_err(|e| unreachable(e.to_string()))
}

/// Name used to register a spec: file stem or last URL segment.
pub fn name_from_source(source: &str) -> String {
    let trimmed = source.trim_end_matches('/');
    let last = if is_url(trimmed) {
        trimmed
            .split(['?', '#'])
            .next()
            .unwrap_or(trimmed)
            .rsplit('/')
            .next()
            .unwrap_or(trimmed)
    } else {
        Path::new(trimmed)
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or(trimmed)
    };
    let stem = last.split('.').next().unwrap_or(last);
    if stem.is_empty() {
        "spec".to_string()
    } else {
        stem.to_string()
    }
}

/// Parse JSON, falling back to YAML. Keys keep their document order.
pub fn parse_document(source: &str, text: &str) -> Result<Value, IngestError> {
    let looks_json = matches!(text.trim_start().chars().next(), Some('{') | Some('['));
    if looks_json {
        return serde_json::from_str(text).map_err(|e| IngestError::Unparseable {
            source_location: source.to_string(),
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        });
    }
    let yaml: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| {
        let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
        IngestError::Unparseable {
            source_location: source.to_string(),
            line,
            column,
            reason: e.to_string(),
        }
    })?;
    match yaml_to_json(yaml) {
        v @ (Value::Object(_) | Value::Array(_)) => Ok(v),
        _ => Err(IngestError::Unparseable {
            source_location: source.to_string(),
            line: 1,
            column: 1,
            reason: "document is not a JSON/YAML object".to_string(),
        }),
    }
}

fn yaml_to_json(v: serde_yaml::Value) -> Value {
    use serde_yaml::Value as Y;
    match v {
        Y::Null => Value::Null,
        Y::Bool(b) => Value::Bool(b),
        Y::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::from(i)
            } else if let Some(u) = n.as_u64() {
                Value::from(u)
            } else {
                n.as_f64()
                    .and_then(serde_json::Number::from_f64)
                    .map(Value::Number)
                    .unwrap_or(Value::Null)
            }
        }
        Y::String(s) => Value::String(s),
        Y::Sequence(seq) => Value::Array(seq.into_iter().map(yaml_to_json).collect()),
        Y::Mapping(map) => {
            let mut out = Map::new();
            for (k, v) in map {
                out.insert(yaml_key(k), yaml_to_json(v));
            }
            Value::Object(out)
        }
        Y::Tagged(tagged) => yaml_to_json(tagged.value),
    }
}

fn yaml_key(k: serde_yaml::Value) -> String {
    use serde_yaml::Value as Y;
    match k {
        Y::String(s) => s,
        Y::Null => "null".to_string(),
        Y::Bool(b) => b.to_string(),
        Y::Number(n) => n.to_string(),
        other => to_token_text(&yaml_to_json(other)),
    }
}

fn is_method(key: &str) -> bool {
    HTTP_METHODS.iter().any(|m| m.eq_ignore_ascii_case(key))
}

fn img_markup() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<img[^>]*(?:>|$)").expect("static regex"))
}

/// Remove every `<img ...>` element from a string.
pub fn strip_img_markup(s: &str) -> std::borrow::Cow<'_, str> {
    img_markup().replace_all(s, "")
}

fn is_admin_segment(segment: &str) -> bool {
    segment.eq_ignore_ascii_case("admin")
}

fn is_admin_path(path: &str) -> bool {
    path.split('/').any(is_admin_segment)
}

fn is_admin_operation(op: &Map<String, Value>) -> bool {
    op.get("tags")
        .and_then(Value::as_array)
        .is_some_and(|tags| tags.iter().filter_map(Value::as_str).any(is_admin_segment))
}

fn is_deprecated(op: &Map<String, Value>) -> bool {
    op.get("deprecated").and_then(Value::as_bool) == Some(true)
}

/// Apply the simplification rules to a document tree.
pub fn simplify_value(raw: &Value) -> Value {
    let mut out = raw.clone();
    if let Some(root) = out.as_object_mut() {
        match root.get_mut("paths") {
            Some(Value::Object(paths)) => prune_paths(paths),
            Some(_) => tracing::warn!("`paths` is not an object; left untouched"),
            None => {}
        }
    }
    strip_strings(&mut out);
    out
}

fn prune_paths(paths: &mut Map<String, Value>) {
    paths.retain(|path, item| {
        if is_admin_path(path) {
            tracing::debug!(path, "dropping admin path");
            return false;
        }
        let Some(item) = item.as_object_mut() else {
            tracing::warn!(path, "path item is not an object; left untouched");
            return true;
        };
        let before = item.keys().filter(|k| is_method(k)).count();
        item.retain(|key, op| {
            if !is_method(key) {
                return true;
            }
            match op.as_object() {
                Some(op) if is_deprecated(op) => {
                    tracing::debug!(path, method = key.as_str(), "dropping deprecated operation");
                    false
                }
                Some(op) if is_admin_operation(op) => {
                    tracing::debug!(path, method = key.as_str(), "dropping admin operation");
                    false
                }
                Some(_) => true,
                None => {
                    tracing::warn!(path, method = key.as_str(), "operation is not an object; left untouched");
                    true
                }
            }
        });
        let after = item.keys().filter(|k| is_method(k)).count();
        !(before > 0 && after == 0)
    });
}

fn strip_strings(v: &mut Value) {
    match v {
        Value::String(s) => {
            if let std::borrow::Cow::Owned(stripped) = strip_img_markup(s) {
                *s = stripped;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_strings),
        Value::Object(map) => map.values_mut().for_each(strip_strings),
        _ => {}
    }
}

/// Populate `simplified` from `raw`.
pub fn simplify_spec(doc: &ApiSpecDoc) -> ApiSpecDoc {
    ApiSpecDoc {
        simplified: Some(simplify_value(&doc.raw)),
        ..doc.clone()
    }
}

pub fn count_tokens(text: &str, tok: &TokenizerHandle) -> usize {
    tok.count(text)
}

/// Token count of a JSON tree in its accounting layout.
pub fn count_value_tokens(value: &Value, tok: &TokenizerHandle) -> usize {
    tok.count(&to_token_text(value))
}

/// Simplify (if needed) and fill in both token counts.
pub fn distill(doc: &ApiSpecDoc, tok: &TokenizerHandle) -> ApiSpecDoc {
    let mut out = if doc.simplified.is_some() {
        doc.clone()
    } else {
        simplify_spec(doc)
    };
    out.original_tokens = Some(count_value_tokens(&out.raw, tok));
    out.simplified_tokens = out.simplified.as_ref().map(|s| count_value_tokens(s, tok));
    out.token_mode = Some(tok.kind());
    out
}
