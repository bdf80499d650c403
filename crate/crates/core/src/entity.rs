//! Typed entity mentions, the extractor and embedding interfaces, and their
//! deterministic defaults.
//!
//! All offsets are character offsets, not byte offsets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EntityError {
    #[error("extractor failed on {doc_id}: {message}")]
    Extraction { doc_id: String, message: String },
    #[error("cannot embed an empty surface")]
    EmptySurface,
    #[error("no precomputed embedding for surface {0:?}")]
    UnknownSurface(String),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("{path} line {line}: {message}")]
    Resource {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SemanticType {
    Problem,
    Test,
    Treatment,
}

impl SemanticType {
    pub const ALL: [SemanticType; 3] = [SemanticType::Problem, SemanticType::Test, SemanticType::Treatment];

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::Problem => "PROBLEM",
            SemanticType::Test => "TEST",
            SemanticType::Treatment => "TREATMENT",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SemanticType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PROBLEM" => Ok(SemanticType::Problem),
            "TEST" => Ok(SemanticType::Test),
            "TREATMENT" => Ok(SemanticType::Treatment),
            other => Err(format!("unknown semantic type {other:?}")),
        }
    }
}

/// One typed mention; `surface` equals the character slice `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub semantic_type: SemanticType,
}

pub trait EntityExtractor: Send + Sync {
    fn extract(&self, doc_id: &str, text: &str) -> Result<Vec<EntitySpan>, EntityError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm vector for `surface`.
    fn embed(&self, surface: &str) -> Result<Vec<f64>, EntityError>;
}

/// Checks the span contract: in bounds, surface equals the slice, sorted by
/// start and pairwise non-overlapping.
pub fn check_spans(doc_id: &str, text: &str, spans: &[EntitySpan]) -> Result<(), EntityError> {
    let chars: Vec<char> = text.chars().collect();
    let fail = |message: String| EntityError::Extraction {
        doc_id: doc_id.to_owned(),
        message,
    };
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > chars.len() {
            return Err(fail(format!("span {i} [{}, {}) out of bounds", s.start, s.end)));
        }
        let slice: String = chars[s.start..s.end].iter().collect();
        if slice != s.surface {
            return Err(fail(format!("span {i} surface {:?} != text {slice:?}", s.surface)));
        }
        if i > 0 && s.start < prev_end {
            return Err(fail(format!("span {i} overlaps or is out of order")));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Runs `extractor` and enforces the span contract on its output.
pub fn extract_entities(doc_id: &str, text: &str, extractor: &dyn EntityExtractor) -> Result<Vec<EntitySpan>, EntityError> {
    let spans = extractor.extract(doc_id, text).map_err(|e| match e {
        EntityError::Extraction { .. } => e,
        other => EntityError::Extraction {
            doc_id: doc_id.to_owned(),
            message: other.to_string(),
        },
    })?;
    check_spans(doc_id, text, &spans)?;
    Ok(spans)
}

/// Lowercases one character when that keeps a 1:1 character mapping.
pub(crate) fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

pub fn normalize_surface(s: &str) -> String {
    s.trim().chars().map(fold_char).collect()
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<char, usize>,
    terminal: Option<SemanticType>,
}

/// Gazetteer matcher: case-insensitive, word-bounded, longest match first and
/// leftmost on equal length.
#[derive(Debug, Clone)]
pub struct LexiconExtractor {
    gazetteer: BTreeMap<String, SemanticType>,
    trie: Vec<TrieNode>,
}

impl LexiconExtractor {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, SemanticType)>,
        S: AsRef<str>,
    {
        let mut gazetteer = BTreeMap::new();
        for (surface, ty) in entries {
            let key = normalize_surface(surface.as_ref());
            if !key.is_empty() {
                gazetteer.insert(key, ty);
            }
        }
        let mut trie = vec![TrieNode::default()];
        for (key, ty) in &gazetteer {
            let mut node = 0;
            for c in key.chars() {
                node = match trie[node].children.get(&c) {
                    Some(&next) => next,
                    None => {
                        trie.push(TrieNode::default());
                        let next = trie.len() - 1;
                        trie[node].children.insert(c, next);
                        next
                    }
                };
            }
            trie[node].terminal = Some(*ty);
        }
        Self { gazetteer, trie }
    }

    /// Reads `surface<TAB>TYPE` lines; `#` starts a comment line.
    pub fn from_tsv(path: &Path) -> Result<Self, EntityError> {
        let file = File::open(path)?;
        let mut entries: Vec<(String, SemanticType)> = Vec::new();
        let mut seen: HashMap<String, SemanticType> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| EntityError::Resource {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let (surface, ty) = line
                .split_once('\t')
                .ok_or_else(|| err("expected surface<TAB>semantic_type".into()))?;
            let ty: SemanticType = ty.parse().map_err(err)?;
            let key = normalize_surface(surface);
            if key.is_empty() {
                return Err(err("empty surface".into()));
            }
            if let Some(prev) = seen.insert(key.clone(), ty) {
                if prev != ty {
                    return Err(err(format!("{key:?} listed as both {prev} and {ty}")));
                }
            }
            entries.push((key, ty));
        }
        Ok(Self::new(entries))
    }

    pub fn gazetteer(&self) -> &BTreeMap<String, SemanticType> {
        &self.gazetteer
    }

    /// Every word-bounded gazetteer occurrence as `(start, end, type)`.
    fn candidates(&self, folded: &[char]) -> Vec<(usize, usize, SemanticType)> {
        let n = folded.len();
        let mut out = Vec::new();
        for start in 0..n {
            if start > 0 && folded[start - 1].is_alphanumeric() {
                continue;
            }
            let mut node = 0;
            for (end, c) in folded.iter().enumerate().skip(start) {
                match self.trie[node].children.get(c) {
                    Some(&next) => node = next,
                    None => break,
                }
                if let Some(ty) = self.trie[node].terminal {
                    let bounded = end + 1 == n || !folded[end + 1].is_alphanumeric();
                    if bounded {
                        out.push((start, end + 1, ty));
                    }
                }
            }
        }
        out
    }
}

impl EntityExtractor for LexiconExtractor {
    fn extract(&self, doc_id: &str, text: &str) -> Result<Vec<EntitySpan>, EntityError> {
        let original: Vec<char> = text.chars().collect();
        let folded: Vec<char> = original.iter().copied().map(fold_char).collect();
        let mut cands = self.candidates(&folded);
        cands.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));

        // start -> (end, type) of accepted spans
        let mut taken: BTreeMap<usize, (usize, SemanticType)> = BTreeMap::new();
        for (start, end, ty) in cands {
            // The nearest accepted span starting before `end` is the only one
            // that can overlap, since accepted spans are disjoint.
            let clash = taken.range(..end).next_back().is_some_and(|(_, &(e, _))| e > start);
            if !clash {
                taken.insert(start, (end, ty));
            }
        }

        Ok(taken
            .into_iter()
            .map(|(start, (end, ty))| EntitySpan {
                doc_id: doc_id.to_owned(),
                start,
                end,
                surface: original[start..end].iter().collect(),
                semantic_type: ty,
            })
            .collect())
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// L2-normalized bag of hashed character n-grams of the lowercased surface.
///
/// The surface is padded with `<` and `>` so that one-character surfaces still
/// yield n-grams.
#[derive(Debug, Clone)]
pub struct HashedNgramProvider {
    dim: usize,
    ngram_sizes: Vec<usize>,
    seed: u64,
}

impl HashedNgramProvider {
    pub const DEFAULT_DIM: usize = 256;
    pub const DEFAULT_SEED: u64 = 0x5eed;

    pub fn new(dim: usize, ngram_sizes: Vec<usize>, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        assert!(ngram_sizes.iter().all(|&n| n > 0), "n-gram sizes must be positive");
        Self { dim, ngram_sizes, seed }
    }
}

impl Default for HashedNgramProvider {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, vec![2, 3], Self::DEFAULT_SEED)
    }
}

impl EmbeddingProvider for HashedNgramProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, surface: &str) -> Result<Vec<f64>, EntityError> {
        if surface.trim().is_empty() {
            return Err(EntityError::EmptySurface);
        }
        let padded: Vec<char> = std::iter::once('<')
            .chain(surface.to_lowercase().chars())
            .chain(std::iter::once('>'))
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for &n in &self.ngram_sizes {
            for w in padded.windows(n) {
                buf.clear();
                buf.extend(w);
                let h = fnv1a(self.seed ^ n as u64, buf.as_bytes());
                v[(h % self.dim as u64) as usize] += 1.0;
            }
        }
        normalize(&mut v)?;
        Ok(v)
    }
}

fn normalize(v: &mut [f64]) -> Result<(), EntityError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EntityError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

#[derive(Deserialize)]
struct StoredVector {
    surface: String,
    vector: Vec<f64>,
}

/// Externally computed embeddings keyed by surface, read from JSONL
/// `{"surface": str, "vector": [f64]}`. Vectors are normalized on load.
/// Lookup tries the exact surface, then its lowercased form.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn from_jsonl(path: &Path) -> Result<Self, EntityError> {
        let file = File::open(path)?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EntityError::Resource {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let rec: StoredVector = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(err(format!("dimension {} differs from {d}", rec.vector.len())))
                }
                _ => {}
            }
            let mut v = rec.vector;
            normalize(&mut v).map_err(|e| err(e.to_string()))?;
            vectors.insert(rec.surface, v);
        }
        let dim = dim.ok_or_else(|| EntityError::Resource {
            path: path.display().to_string(),
            line: 0,
            message: "no vectors".into(),
        })?;
        Ok(Self { dim, vectors })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, surface: &str) -> Result<Vec<f64>, EntityError> {
        if surface.trim().is_empty() {
            return Err(EntityError::EmptySurface);
        }
        self.vectors
            .get(surface)
            .or_else(|| self.vectors.get(&surface.to_lowercase()))
            .cloned()
            .ok_or_else(|| EntityError::UnknownSurface(surface.to_owned()))
    }
}

pub fn embed(surface: &str, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>, EntityError> {
    provider.embed(surface)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EntityError> {
    if a.len() != b.len() {
        return Err(EntityError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EntityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Memoizes embeddings per surface for one unit of work (an admission).
pub struct EmbeddingCache<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        Self {
            provider,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, surface: &str) -> Result<&[f64], EntityError> {
        if !self.cache.contains_key(surface) {
            let v = self.provider.embed(surface)?;
            self.cache.insert(surface.to_owned(), v);
        }
        Ok(&self.cache[surface])
    }

    pub fn similarity(&mut self, a: &str, b: &str) -> Result<f64, EntityError> {
        let va = self.get(a)?.to_vec();
        let vb = self.get(b)?;
        cosine_similarity(&va, vb)
    }

    /// Exact match or cosine at or above `threshold`.
    pub fn is_synonym(&mut self, a: &str, b: &str, threshold: f64) -> Result<bool, EntityError> {
        Ok(a == b || self.similarity(a, b)? >= threshold)
    }
}
