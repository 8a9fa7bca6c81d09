//! Structural chunking of a simplified spec, a flat vector index over the
//! chunks, and multi-query retrieval.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm_gateway::{Embedder, GatewayError, LlmGateway, ModelProfile};
use crate::num::{cosine, Scalar};
use crate::prompt_forge::{ChatHistory, PromptError, PromptTemplates, Role};
use crate::spec_ingest::{to_token_text, ApiSpecDoc, TokenizerHandle};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_VARIANTS: usize = 5;
/// Chunks per embedding request.
pub const EMBED_BATCH: usize = 16;
const EMBED_WORKERS: usize = 4;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("invalid chunker config: need 0 < min_tokens <= max_tokens, got {min}/{max}")]
    InvalidConfig { min: usize, max: usize },
    #[error("document to split must be a non-empty object or array")]
    EmptyDocument,
    #[error("value at {pointer} cannot be split below {max} tokens")]
    Indivisible { pointer: String, max: usize },
    #[error("embedding chunk {chunk_id} failed: {source}")]
    Embedding {
        chunk_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("embedding dimension {got} differs from {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("requirement is empty")]
    EmptyRequirement,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("no query could be embedded; last error: {0}")]
    NoQueryEmbedded(String),
    #[error("index snapshot {0}")]
    Snapshot(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig {
            min_tokens: 800,
            max_tokens: 1200,
        }
    }
}

impl ChunkerConfig {
    pub fn new(min_tokens: usize, max_tokens: usize) -> Result<Self, RagError> {
        let cfg = ChunkerConfig { min_tokens, max_tokens };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RagError> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(RagError::InvalidConfig {
                min: self.min_tokens,
                max: self.max_tokens,
            });
        }
        Ok(())
    }
}

/// A JSON fragment of the spec: the selected leaves nested under their
/// ancestor keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    /// JSON pointers of the leaves carried by this chunk, in document order.
    pub origin_pointers: Vec<String>,
    pub text: String,
    pub token_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Seg {
    Key(String),
    Index(usize),
}

/// A scalar or empty container at `path`, or one window of a long string.
#[derive(Debug, Clone)]
struct Leaf {
    path: Vec<Seg>,
    value: Value,
}

type Piece = (Vec<Leaf>, usize);

pub fn json_pointer(path: &[impl AsRef<str>]) -> String {
    path.iter()
        .map(|s| format!("/{}", s.as_ref().replace('~', "~0").replace('/', "~1")))
        .collect()
}

fn pointer_of(path: &[Seg]) -> String {
    let parts: Vec<String> = path
        .iter()
        .map(|s| match s {
            Seg::Key(k) => k.clone(),
            Seg::Index(i) => i.to_string(),
        })
        .collect();
    json_pointer(&parts)
}

/// Pointers of every leaf of `doc` in document order. Empty objects and
/// arrays count as leaves.
pub fn leaf_pointers(doc: &Value) -> Vec<String> {
    let mut leaves = Vec::new();
    collect_leaves(&mut Vec::new(), doc, &mut leaves);
    leaves.iter().map(|l| pointer_of(&l.path)).collect()
}

fn collect_leaves(path: &mut Vec<Seg>, value: &Value, out: &mut Vec<Leaf>) {
    match value {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                path.push(Seg::Key(k.clone()));
                collect_leaves(path, v, out);
                path.pop();
            }
        }
        Value::Array(a) if !a.is_empty() => {
            for (i, v) in a.iter().enumerate() {
                path.push(Seg::Index(i));
                collect_leaves(path, v, out);
                path.pop();
            }
        }
        _ => out.push(Leaf {
            path: path.clone(),
            value: value.clone(),
        }),
    }
}

enum Node {
    Leaf(Value),
    Obj(Vec<(String, Node)>),
    Arr(Vec<(usize, Node)>),
}

impl Node {
    fn for_seg(seg: Option<&Seg>, value: &Value) -> Node {
        match seg {
            None => Node::Leaf(value.clone()),
            Some(Seg::Key(_)) => Node::Obj(Vec::new()),
            Some(Seg::Index(_)) => Node::Arr(Vec::new()),
        }
    }

    fn insert(&mut self, path: &[Seg], value: &Value) {
        let Some((head, rest)) = path.split_first() else {
            // a later window of the same string leaf
            if let (Node::Leaf(Value::String(s)), Value::String(more)) = (&mut *self, value) {
                s.push_str(more);
            }
            return;
        };
        match (self, head) {
            (Node::Obj(entries), Seg::Key(k)) => {
                if entries.last().is_none_or(|(last, _)| last != k) {
                    entries.push((k.clone(), Node::for_seg(rest.first(), value)));
                } else if rest.is_empty() {
                    entries.last_mut().expect("checked").1.insert(rest, value);
                    return;
                }
                entries.last_mut().expect("pushed").1.insert_below(rest, value);
            }
            (Node::Arr(entries), Seg::Index(i)) => {
                if entries.last().is_none_or(|(last, _)| last != i) {
                    entries.push((*i, Node::for_seg(rest.first(), value)));
                } else if rest.is_empty() {
                    entries.last_mut().expect("checked").1.insert(rest, value);
                    return;
                }
                entries.last_mut().expect("pushed").1.insert_below(rest, value);
            }
            _ => unreachable!("path segments follow the document shape"),
        }
    }

    fn insert_below(&mut self, rest: &[Seg], value: &Value) {
        if !rest.is_empty() {
            self.insert(rest, value);
        }
    }

    fn into_value(self) -> Value {
        match self {
            Node::Leaf(v) => v,
            Node::Obj(entries) => Value::Object(entries.into_iter().map(|(k, n)| (k, n.into_value())).collect::<Map<_, _>>()),
            Node::Arr(entries) => Value::Array(entries.into_iter().map(|(_, n)| n.into_value()).collect()),
        }
    }
}

/// Nested JSON holding exactly `leaves`. Array elements keep their order
/// but not their original indices; those live in the pointers.
fn render(leaves: &[Leaf]) -> Value {
    let Some(first) = leaves.first() else {
        return Value::Object(Map::new());
    };
    let mut root = Node::for_seg(first.path.first(), &first.value);
    for leaf in leaves {
        root.insert(&leaf.path, &leaf.value);
    }
    root.into_value()
}

struct Splitter<'a> {
    cfg: ChunkerConfig,
    tok: &'a TokenizerHandle,
}

impl Splitter<'_> {
    fn tokens(&self, leaves: &[Leaf]) -> usize {
        self.tok.count(&to_token_text(&render(leaves)))
    }

    fn split(&self, path: &mut Vec<Seg>, value: &Value) -> Result<Vec<Piece>, RagError> {
        let mut leaves = Vec::new();
        collect_leaves(path, value, &mut leaves);
        let t = self.tokens(&leaves);
        if t <= self.cfg.max_tokens {
            return Ok(vec![(leaves, t)]);
        }
        let mut pieces = Vec::new();
        match value {
            Value::Object(m) if !m.is_empty() => {
                for (k, v) in m {
                    path.push(Seg::Key(k.clone()));
                    pieces.extend(self.split(path, v)?);
                    path.pop();
                }
            }
            Value::Array(a) if !a.is_empty() => {
                for (i, v) in a.iter().enumerate() {
                    path.push(Seg::Index(i));
                    pieces.extend(self.split(path, v)?);
                    path.pop();
                }
            }
            Value::String(s) => return self.hard_split(path, s),
            _ => {
                return Err(RagError::Indivisible {
                    pointer: pointer_of(path),
                    max: self.cfg.max_tokens,
                })
            }
        }
        Ok(self.merge(pieces))
    }

    /// Greedy left-to-right merge of sibling pieces: a piece absorbs its
    /// right neighbour while either is under `min_tokens` and the union
    /// still fits `max_tokens`.
    fn merge(&self, pieces: Vec<Piece>) -> Vec<Piece> {
        let mut out: Vec<Piece> = Vec::new();
        let mut cur: Option<Piece> = None;
        for (leaves, t) in pieces {
            cur = Some(match cur.take() {
                None => (leaves, t),
                Some((mut acc, at)) => {
                    if at < self.cfg.min_tokens || t < self.cfg.min_tokens {
                        let n = acc.len();
                        acc.extend(leaves.iter().cloned());
                        let mt = self.tokens(&acc);
                        if mt <= self.cfg.max_tokens {
                            cur = Some((acc, mt));
                            continue;
                        }
                        acc.truncate(n);
                    }
                    out.push((acc, at));
                    (leaves, t)
                }
            });
        }
        out.extend(cur);
        out
    }

    /// Character windows of a string too long for one chunk. Each window is
    /// the longest prefix of the remainder that fits.
    fn hard_split(&self, path: &[Seg], s: &str) -> Result<Vec<Piece>, RagError> {
        let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain([s.len()]).collect();
        let window = |a: usize, b: usize| {
            vec![Leaf {
                path: path.to_vec(),
                value: Value::String(s[bounds[a]..bounds[b]].to_string()),
            }]
        };
        let last = bounds.len() - 1;
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < last {
            let fits = |end: usize| self.tokens(&window(start, end)) <= self.cfg.max_tokens;
            if !fits(start + 1) {
                return Err(RagError::Indivisible {
                    pointer: pointer_of(path),
                    max: self.cfg.max_tokens,
                });
            }
            let (mut lo, mut hi) = (start + 1, last);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if fits(mid) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            let leaves = window(start, lo);
            let t = self.tokens(&leaves);
            pieces.push((leaves, t));
            start = lo;
        }
        Ok(pieces)
    }
}

fn chunk_id(pointers: &[String], text: &str) -> String {
    let mut h = Sha256::new();
    for p in pointers {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    h.update(b"\0");
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// Split `doc` along its JSON structure into chunks of at most
/// `cfg.max_tokens` tokens.
///
/// A subtree that fits becomes one piece; otherwise its children are split
/// and adjacent pieces merged. A string leaf that does not fit on its own
/// is cut into windows that all carry the leaf's pointer.
pub fn split_json(doc: &Value, cfg: ChunkerConfig, tok: &TokenizerHandle) -> Result<Vec<Chunk>, RagError> {
    cfg.validate()?;
    let non_empty = match doc {
        Value::Object(m) => !m.is_empty(),
        Value::Array(a) => !a.is_empty(),
        _ => false,
    };
    if !non_empty {
        return Err(RagError::EmptyDocument);
    }
    let splitter = Splitter { cfg, tok };
    let pieces = splitter.split(&mut Vec::new(), doc)?;
    Ok(pieces
        .into_iter()
        .map(|(leaves, token_len)| {
            let mut origin_pointers: Vec<String> = Vec::with_capacity(leaves.len());
            for l in &leaves {
                let p = pointer_of(&l.path);
                if origin_pointers.last() != Some(&p) {
                    origin_pointers.push(p);
                }
            }
            let text = to_token_text(&render(&leaves));
            ChunkBuilder {
                origin_pointers,
                text,
                token_len,
            }
            .finish()
        })
        .collect())
}

struct ChunkBuilder {
    origin_pointers: Vec<String>,
    text: String,
    token_len: usize,
}

impl ChunkBuilder {
    fn finish(self) -> Chunk {
        Chunk {
            chunk_id: chunk_id(&self.origin_pointers, &self.text),
            origin_pointers: self.origin_pointers,
            text: self.text,
            token_len: self.token_len,
        }
    }
}

/// Chunks with their embeddings. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexSnapshot<T>", into = "IndexSnapshot<T>")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct VectorIndex<T: Scalar> {
    spec_name: String,
    dim: usize,
    chunks: Vec<Chunk>,
    vectors: Vec<Vec<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct IndexSnapshot<T: Scalar> {
    spec_name: String,
    dim: usize,
    chunks: Vec<Chunk>,
    vectors: Vec<Vec<T>>,
}

impl<T: Scalar> TryFrom<IndexSnapshot<T>> for VectorIndex<T> {
    type Error = RagError;
    fn try_from(s: IndexSnapshot<T>) -> Result<Self, RagError> {
        VectorIndex::new(s.spec_name, s.chunks, s.vectors).and_then(|ix| {
            if ix.dim != s.dim {
                Err(RagError::DimensionMismatch {
                    expected: s.dim,
                    got: ix.dim,
                })
            } else {
                Ok(ix)
            }
        })
    }
}

impl<T: Scalar> From<VectorIndex<T>> for IndexSnapshot<T> {
    fn from(ix: VectorIndex<T>) -> Self {
        IndexSnapshot {
            spec_name: ix.spec_name,
            dim: ix.dim,
            chunks: ix.chunks,
            vectors: ix.vectors,
        }
    }
}

impl<T: Scalar> VectorIndex<T> {
    /// Checks parallel lengths, a uniform positive dimension and finite
    /// components.
    pub fn new(spec_name: impl Into<String>, chunks: Vec<Chunk>, vectors: Vec<Vec<T>>) -> Result<Self, RagError> {
        if chunks.len() != vectors.len() {
            return Err(RagError::Snapshot(format!(
                "has {} chunks but {} vectors",
                chunks.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(RagError::Snapshot("has no vectors".into()));
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(RagError::DimensionMismatch { expected: dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RagError::Snapshot("contains a non-finite component".into()));
            }
        }
        Ok(VectorIndex {
            spec_name: spec_name.into(),
            dim,
            chunks,
            vectors,
        })
    }

    pub fn spec_name(&self) -> &str {
        &self.spec_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), RagError> {
        let text = serde_json::to_string(self).map_err(|e| RagError::Snapshot(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| RagError::Snapshot(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, RagError> {
        let text = std::fs::read_to_string(path).map_err(|e| RagError::Snapshot(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RagError::Snapshot(format!("{}: {e}", path.display())))
    }

    /// Indices of the `top_k` chunks closest to `query`, best first, ties by
    /// chunk id.
    pub fn nearest(&self, query: &[T], top_k: usize) -> Vec<(usize, T)> {
        let mut scored: Vec<(usize, T)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, cosine(query, v)))
            .collect();
        scored.sort_by(|a, b| self.rank(a, b));
        scored.truncate(top_k);
        scored
    }

    fn rank(&self, a: &(usize, T), b: &(usize, T)) -> Ordering {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.chunks[a.0].chunk_id.cmp(&self.chunks[b.0].chunk_id))
    }
}

/// Chunk the simplified spec and embed every chunk. Batches are embedded
/// concurrently; the dimension comes from the first batch.
pub fn build_index<T: Scalar, E: Embedder<T> + ?Sized>(
    spec: &ApiSpecDoc,
    cfg: ChunkerConfig,
    tok: &TokenizerHandle,
    embedder: &E,
) -> Result<VectorIndex<T>, RagError> {
    let chunks = split_json(spec.effective(), cfg, tok)?;
    let batches: Vec<&[Chunk]> = chunks.chunks(EMBED_BATCH).collect();
    let mut results: Vec<Option<Result<Vec<Vec<T>>, RagError>>> = (0..batches.len()).map(|_| None).collect();
    for group in (0..batches.len()).collect::<Vec<_>>().chunks(EMBED_WORKERS) {
        std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&b| {
                    let batch = batches[b];
                    s.spawn(move || {
                        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
                        embedder.embed(&texts).map_err(|source| RagError::Embedding {
                            chunk_id: batch[0].chunk_id.clone(),
                            source,
                        })
                    })
                })
                .collect();
            for (&b, h) in group.iter().zip(handles) {
                results[b] = Some(h.join().expect("embedding worker panicked"));
            }
        });
    }
    let mut vectors = Vec::with_capacity(chunks.len());
    let mut dim = None;
    for (batch, r) in batches.iter().zip(results) {
        let vs = r.expect("every batch ran")?;
        if vs.len() != batch.len() {
            return Err(RagError::Embedding {
                chunk_id: batch[0].chunk_id.clone(),
                source: GatewayError::CountMismatch {
                    expected: batch.len(),
                    got: vs.len(),
                },
            });
        }
        for v in vs {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(RagError::DimensionMismatch { expected, got: v.len() });
            }
            vectors.push(v);
        }
    }
    VectorIndex::new(spec.name.clone(), chunks, vectors)
}

/// The requirement and its paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub original: String,
    pub variants: Vec<String>,
}

impl QuerySet {
    pub fn single(original: impl Into<String>) -> Self {
        QuerySet {
            original: original.into(),
            variants: Vec::new(),
        }
    }

    /// Original first, then the variants.
    pub fn effective(&self) -> Vec<&str> {
        std::iter::once(self.original.as_str())
            .chain(self.variants.iter().map(String::as_str))
            .collect()
    }
}

/// Variants from an expansion reply: one per line, list markers stripped,
/// blanks, duplicates and copies of the original dropped.
pub fn parse_variants(reply: &str, original: &str, count: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in reply.lines() {
        let t = line
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')', '-', '*', '•'])
            .trim()
            .trim_matches('"')
            .trim();
        // a bare number was not a list marker
        let t = if t.is_empty() { line.trim() } else { t };
        if t.is_empty() || t.eq_ignore_ascii_case(original.trim()) || out.iter().any(|o| o == t) {
            continue;
        }
        out.push(t.to_string());
        if out.len() == count {
            break;
        }
    }
    out
}

/// Ask the model for `count` paraphrases of `requirement`. A failed call
/// degrades to the original alone.
pub fn expand_requirement(
    requirement: &str,
    gateway: &LlmGateway,
    profile: &ModelProfile,
    templates: &PromptTemplates,
    count: usize,
) -> Result<QuerySet, RagError> {
    if requirement.trim().is_empty() {
        return Err(RagError::EmptyRequirement);
    }
    if count == 0 {
        return Ok(QuerySet::single(requirement));
    }
    let history = ChatHistory::new(templates.render_expansion_prompt(count)?)?.append_turn(Role::User, requirement)?;
    match gateway.chat_complete(&history, profile) {
        Ok((reply, _)) => Ok(QuerySet {
            original: requirement.to_string(),
            variants: parse_variants(&reply, requirement, count),
        }),
        Err(e) => {
            tracing::warn!("requirement expansion failed, retrieving with the original only: {e}");
            Ok(QuerySet::single(requirement))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<T> {
    pub chunk: Chunk,
    pub score: T,
}

/// Union of the `top_k` nearest chunks of every effective query, each chunk
/// once with its best score; best first, ties by chunk id. Queries whose
/// embedding fails are skipped.
pub fn retrieve_context<T: Scalar, E: Embedder<T> + ?Sized>(
    qs: &QuerySet,
    index: &VectorIndex<T>,
    top_k: usize,
    embedder: &E,
) -> Result<Vec<Hit<T>>, RagError> {
    if top_k == 0 {
        return Err(RagError::InvalidTopK);
    }
    let mut best: HashMap<usize, T> = HashMap::new();
    let mut embedded = 0;
    let mut last_error = String::new();
    for q in qs.effective() {
        let v = match embedder.embed(&[q.to_string()]) {
            Ok(mut vs) if vs.len() == 1 && vs[0].len() == index.dim() => vs.remove(0),
            Ok(vs) => {
                last_error = format!("query embedding has shape {}x{}", vs.len(), vs.first().map_or(0, Vec::len));
                tracing::warn!("skipping query {q:?}: {last_error}");
                continue;
            }
            Err(e) => {
                last_error = e.to_string();
                tracing::warn!("skipping query {q:?}: {e}");
                continue;
            }
        };
        embedded += 1;
        for (i, score) in index.nearest(&v, top_k) {
            let slot = best.entry(i).or_insert(score);
            if score > *slot {
                *slot = score;
            }
        }
    }
    if embedded == 0 {
        return Err(RagError::NoQueryEmbedded(last_error));
    }
    let mut ranked: Vec<(usize, T)> = best.into_iter().collect();
    ranked.sort_by(|a, b| index.rank(a, b));
    Ok(ranked
        .into_iter()
        .map(|(i, score)| Hit {
            chunk: index.chunks()[i].clone(),
            score,
        })
        .collect())
}

/// Retrieved chunk texts joined into a prompt context.
pub fn join_context<T>(hits: &[Hit<T>]) -> String {
    hits.iter().map(|h| h.chunk.text.as_str()).collect::<Vec<_>>().join("\n")
}
