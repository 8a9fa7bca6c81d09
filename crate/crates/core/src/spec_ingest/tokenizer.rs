//! Token counting: exact cl100k_base BPE when the vocabulary file is
//! available, a deterministic bytes/4 approximation otherwise.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use parking_lot::Mutex;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiktoken_rs::{CoreBPE, Rank};

/// Pre-tokenization pattern of the cl100k_base encoding.
const CL100K_PATTERN: &str = "'(?i:[sdmt]|ll|ve|re)|[^\\r\\n\\p{L}\\p{N}]?+\\p{L}++|\\p{N}{1,3}+| ?[^\\s\\p{L}\\p{N}]++[\\r\\n]*+|\\s++$|\\s*[\\r\\n]|\\s+(?!\\S)|\\s";

const CL100K_SPECIALS: [(&str, Rank); 5] = [
    ("<|endoftext|>", 100257),
    ("<|fim_prefix|>", 100258),
    ("<|fim_middle|>", 100259),
    ("<|fim_suffix|>", 100260),
    ("<|endofprompt|>", 100276),
];

/// Environment variable overriding the vocabulary location.
pub const VOCABULARY_ENV: &str = "TESTGENIE_CL100K";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary file {path} is missing or unreadable: {reason}")]
    MissingVocabulary { path: PathBuf, reason: String },
    #[error("vocabulary file {path} is malformed at line {line}")]
    MalformedVocabulary { path: PathBuf, line: usize },
    #[error("failed to build BPE encoder: {0}")]
    Encoder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    ExactBpe,
    Approximate,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::ExactBpe => "exact-bpe",
            TokenizerKind::Approximate => "approximate",
        })
    }
}

enum Backend {
    Exact(Arc<CoreBPE>),
    Approximate,
}

/// Cheap to clone; loaded vocabularies are shared process-wide.
#[derive(Clone)]
pub struct TokenizerHandle {
    backend: Arc<Backend>,
    vocabulary_source: Option<PathBuf>,
}

impl fmt::Debug for TokenizerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenizerHandle")
            .field("kind", &self.kind())
            .field("vocabulary_source", &self.vocabulary_source)
            .finish()
    }
}

fn loaded() -> &'static Mutex<HashMap<PathBuf, Arc<CoreBPE>>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<CoreBPE>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

impl TokenizerHandle {
    pub fn approximate() -> Self {
        TokenizerHandle {
            backend: Arc::new(Backend::Approximate),
            vocabulary_source: None,
        }
    }

    /// Load a `.tiktoken` rank file (`<base64 token> <rank>` per line).
    pub fn exact_from_file(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref().to_path_buf();
        let key = path.canonicalize().unwrap_or_else(|_| path.clone());
        let mut cache = loaded().lock();
        let bpe = match cache.get(&key) {
            Some(bpe) => bpe.clone(),
            None => {
                let bpe = Arc::new(build_bpe(&path)?);
                cache.insert(key, bpe.clone());
                bpe
            }
        };
        Ok(TokenizerHandle {
            backend: Arc::new(Backend::Exact(bpe)),
            vocabulary_source: Some(path),
        })
    }

    /// Exact when the vocabulary file loads, approximate otherwise.
    pub fn auto(vocabulary: Option<&Path>) -> Self {
        let path = vocabulary
            .map(Path::to_path_buf)
            .unwrap_or_else(default_vocabulary_path);
        match Self::exact_from_file(&path) {
            Ok(tok) => tok,
            Err(err) => {
                tracing::warn!("falling back to approximate token counts: {err}");
                Self::approximate()
            }
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        match *self.backend {
            Backend::Exact(_) => TokenizerKind::ExactBpe,
            Backend::Approximate => TokenizerKind::Approximate,
        }
    }

    pub fn vocabulary_source(&self) -> Option<&Path> {
        self.vocabulary_source.as_deref()
    }

    pub fn count(&self, text: &str) -> usize {
        match &*self.backend {
            Backend::Exact(bpe) => bpe.encode_ordinary(text).len(),
            Backend::Approximate => text.len().div_ceil(4),
        }
    }
}

/// `$TESTGENIE_CL100K`, else the copy shipped with this crate.
pub fn default_vocabulary_path() -> PathBuf {
    std::env::var_os(VOCABULARY_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/cl100k_base.tiktoken"))
}

fn build_bpe(path: &Path) -> Result<CoreBPE, TokenizerError> {
    let data = std::fs::read_to_string(path).map_err(|e| TokenizerError::MissingVocabulary {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut encoder: FxHashMap<Vec<u8>, Rank> = FxHashMap::default();
    for (i, line) in data.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = || TokenizerError::MalformedVocabulary {
            path: path.to_path_buf(),
            line: i + 1,
        };
        let (token, rank) = line.split_once(' ').ok_or_else(malformed)?;
        let token = STANDARD.decode(token).map_err(|_| malformed())?;
        let rank: Rank = rank.trim().parse().map_err(|_| malformed())?;
        encoder.insert(token, rank);
    }
    if encoder.is_empty() {
        return Err(TokenizerError::MalformedVocabulary {
            path: path.to_path_buf(),
            line: 0,
        });
    }
    let specials: FxHashMap<String, Rank> = CL100K_SPECIALS
        .iter()
        .map(|(s, r)| (s.to_string(), *r))
        .collect();
    CoreBPE::new(encoder, specials, CL100K_PATTERN).map_err(|e| TokenizerError::Encoder(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact() -> TokenizerHandle {
        TokenizerHandle::exact_from_file(default_vocabulary_path()).expect("vocabulary asset ships with the crate")
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert_eq!(exact().count(""), 0);
        assert_eq!(TokenizerHandle::approximate().count(""), 0);
    }

    #[test]
    fn approximate_is_ceil_bytes_over_four() {
        let tok = TokenizerHandle::approximate();
        assert_eq!(tok.count("a"), 1);
        assert_eq!(tok.count("abcd"), 1);
        assert_eq!(tok.count("abcde"), 2);
        // multi-byte characters count by bytes
        assert_eq!(tok.count("éé"), 1);
        assert_eq!(tok.count("ééé"), 2);
    }

    #[test]
    fn exact_counts_match_reference_encoder() {
        // Reference values produced by the tiktoken cl100k_base encoder.
        let tok = exact();
        assert_eq!(tok.kind(), TokenizerKind::ExactBpe);
        assert_eq!(tok.count("hello world"), 2);
        assert_eq!(tok.count("tiktoken is great!"), 6);
        assert_eq!(tok.count("<|endoftext|>"), 7);
    }

    #[test]
    fn missing_vocabulary_is_an_error() {
        let err = TokenizerHandle::exact_from_file("/nonexistent/cl100k.tiktoken").unwrap_err();
        assert!(matches!(err, TokenizerError::MissingVocabulary { .. }));
        assert!(err.to_string().contains("/nonexistent/cl100k.tiktoken"));
    }

    #[test]
    fn auto_falls_back_without_vocabulary() {
        let tok = TokenizerHandle::auto(Some(Path::new("/nonexistent/vocab")));
        assert_eq!(tok.kind(), TokenizerKind::Approximate);
    }

    #[test]
    fn malformed_vocabulary_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tiktoken");
        std::fs::write(&path, "IQ== 0\nnot-a-valid-line\n").unwrap();
        match TokenizerHandle::exact_from_file(&path) {
            Err(TokenizerError::MalformedVocabulary { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
