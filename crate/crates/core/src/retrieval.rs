//! Scoring and ranking of training users by similarity to a test user.
//!
//! Three similarity signals are supported: a seeded random score, the number
//! of shared history items, and cosine similarity between embeddings of the
//! users' recent-title text. Embeddings come from an [`EmbeddingProvider`]
//! and are memoized in an [`EmbeddingCache`] that can persist to JSONL.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Catalog, ItemId, UserId, UserSequence};
use crate::http::{HttpError, JsonEndpoint, RetryPolicy};
use crate::seed::{derive_seed, sha256_hex, unit_hash};

/// Number of most recent history items shown in prompts and embedded.
pub const HISTORY_WINDOW: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("embedding request failed: {0}")]
    Http(#[from] HttpError),
    #[error("embedding response malformed: {0}")]
    BadResponse(String),
    #[error("embedding dimension {got} does not match cache dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("no candidate demonstrations in the pool")]
    EmptyPool,
    #[error("requested {k} demonstrations but the pool only has {available}")]
    PoolTooSmall { k: usize, available: usize },
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// The most recent `window` items of a history (all of it when shorter).
pub fn recent(history: &[ItemId], window: usize) -> &[ItemId] {
    &history[history.len().saturating_sub(window)..]
}

/// Titles of the most recent [`HISTORY_WINDOW`] items, oldest first, joined with ", ".
pub fn sequence_text(history: &[ItemId], catalog: &Catalog) -> Result<String> {
    let titles = recent(history, HISTORY_WINDOW)
        .iter()
        .map(|id| {
            catalog
                .title(id)
                .ok_or_else(|| RetrievalError::UnknownItem(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(titles.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self {
            model_id: model_id.into(),
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            model_id: self.model_id.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;

    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Offline provider: each text maps to a unit vector drawn from a ChaCha
/// stream seeded by the hash of the text.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    model_id: String,
    dim: usize,
    seed: u64,
    calls: std::sync::Arc<AtomicUsize>,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            model_id: format!("mock-hash-{dim}"),
            dim: dim.max(1),
            seed,
            calls: Default::default(),
        }
    }

    /// Number of `embed_batch` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["embed", text]));
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` client: `{model, input: [..]}` in,
/// `{data: [{embedding: [..]}]}` out.
#[derive(Debug)]
pub struct HttpEmbedder {
    endpoint: JsonEndpoint,
    model: String,
    calls: AtomicUsize,
}

impl HttpEmbedder {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self> {
        Ok(Self {
            endpoint: JsonEndpoint::new(url, api_key, timeout, retry)?,
            model: model.into(),
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of successful HTTP round trips.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let response = self
            .endpoint
            .post(&json!({ "model": self.model, "input": texts }))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let data = response.body["data"]
            .as_array()
            .ok_or_else(|| RetrievalError::BadResponse("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(RetrievalError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, entry) in data.iter().enumerate() {
            let slot = entry["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let values = entry["embedding"]
                .as_array()
                .ok_or_else(|| RetrievalError::BadResponse("missing `embedding`".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| RetrievalError::BadResponse("non-numeric value".into())))
                .collect::<Result<Vec<f64>>>()?;
            *out.get_mut(slot)
                .ok_or_else(|| RetrievalError::BadResponse(format!("index {slot} out of range")))? = values;
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model_id: String,
    vector: Vec<f64>,
}

#[derive(Default)]
struct CacheState {
    vectors: HashMap<String, EmbeddingVector>,
    dim: Option<usize>,
    writer: Option<BufWriter<File>>,
}

/// Embedding memo keyed by `sha256(model_id + text)`, optionally backed by an
/// append-only JSONL file. Writes are serialized through a mutex.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    state: Mutex<CacheState>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new(CacheState::default()),
        }
    }

    /// Loads existing records from `path` (if present) and appends new ones to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let cache_err = |message: String| RetrievalError::Cache {
            path: path.clone(),
            message,
        };
        let mut state = CacheState::default();
        if path.exists() {
            let file = File::open(&path).map_err(|e| cache_err(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheLine = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", n + 1)))?;
                let dim = *state.dim.get_or_insert(rec.vector.len());
                if dim != rec.vector.len() {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: dim,
                        got: rec.vector.len(),
                    });
                }
                state
                    .vectors
                    .insert(rec.key, EmbeddingVector::new(rec.model_id, rec.vector)?);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cache_err(e.to_string()))?;
        state.writer = Some(BufWriter::new(file));
        Ok(Self {
            path: Some(path),
            state: Mutex::new(state),
        })
    }

    pub fn key(model_id: &str, text: &str) -> String {
        sha256_hex(format!("{model_id}{text}"))
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock poisoned").vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<EmbeddingVector> {
        let state = self.state.lock().expect("cache lock poisoned");
        state.vectors.get(&Self::key(model_id, text)).cloned()
    }

    pub fn insert(&self, text: &str, vector: EmbeddingVector) -> Result<()> {
        let mut state = self.state.lock().expect("cache lock poisoned");
        let dim = *state.dim.get_or_insert(vector.dim());
        if dim != vector.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: dim,
                got: vector.dim(),
            });
        }
        let key = Self::key(&vector.model_id, text);
        if state.vectors.contains_key(&key) {
            return Ok(());
        }
        if let Some(writer) = state.writer.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                model_id: vector.model_id.clone(),
                vector: vector.values.clone(),
            })
            .expect("cache line serializes");
            writeln!(writer, "{line}")
                .and_then(|_| writer.flush())
                .map_err(|e| RetrievalError::Cache {
                    path: self.path.clone().unwrap_or_default(),
                    message: e.to_string(),
                })?;
        }
        state.vectors.insert(key, vector);
        Ok(())
    }
}

/// Returns the cached vector for `text`, fetching and persisting it on a miss.
pub fn embed(text: &str, provider: &dyn EmbeddingProvider, cache: &EmbeddingCache) -> Result<EmbeddingVector> {
    if let Some(v) = cache.get(provider.model_id(), text) {
        return Ok(v);
    }
    let values = provider
        .embed_batch(&[text.to_owned()])?
        .pop()
        .ok_or_else(|| RetrievalError::BadResponse("empty embedding batch".into()))?;
    let vector = EmbeddingVector::new(provider.model_id(), values)?;
    cache.insert(text, vector.clone())?;
    Ok(vector)
}

/// Embeds many texts, fetching cache misses in batches of `batch_size` with at
/// most `concurrency` requests in flight.
pub fn embed_many(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    batch_size: usize,
    concurrency: usize,
) -> Result<Vec<EmbeddingVector>> {
    let model = provider.model_id().to_owned();
    let mut seen = HashSet::new();
    let missing: Vec<String> = texts
        .iter()
        .filter(|t| cache.get(&model, t).is_none() && seen.insert(t.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
            .map_err(|e| RetrievalError::BadResponse(e.to_string()))?;
        pool.install(|| {
            missing
                .par_chunks(batch_size.max(1))
                .try_for_each(|chunk| -> Result<()> {
                    let vectors = provider.embed_batch(chunk)?;
                    if vectors.len() != chunk.len() {
                        return Err(RetrievalError::BadResponse("batch size mismatch".into()));
                    }
                    for (text, values) in chunk.iter().zip(vectors) {
                        cache.insert(text, EmbeddingVector::new(model.clone(), values)?)?;
                    }
                    Ok(())
                })
        })?;
    }
    texts
        .iter()
        .map(|t| {
            cache
                .get(&model, t)
                .ok_or_else(|| RetrievalError::BadResponse("vector missing after fetch".into()))
        })
        .collect()
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine(&u.values, &v.values)
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(RetrievalError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Number of distinct items shared by two histories.
pub fn overlap_score(a: &[ItemId], b: &[ItemId]) -> usize {
    let a: HashSet<&ItemId> = a.iter().collect();
    b.iter().collect::<HashSet<_>>().intersection(&a).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityMethod {
    Random { seed: u64 },
    Overlap,
    Embedding,
}

/// Scores every pool entry against a query history; higher is more similar.
pub trait SimilarityScorer: Send + Sync {
    fn score_all(&self, user: &UserId, history: &[ItemId], pool: &[&UserSequence]) -> Result<Vec<f64>>;
}

/// Score is a hash of (seed, query user, pool user): independent of pool order.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl SimilarityScorer for RandomScorer {
    fn score_all(&self, user: &UserId, _history: &[ItemId], pool: &[&UserSequence]) -> Result<Vec<f64>> {
        Ok(pool
            .iter()
            .map(|p| unit_hash(self.seed, &["random-demo", user.as_str(), p.user.as_str()]))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer;

impl SimilarityScorer for OverlapScorer {
    fn score_all(&self, _user: &UserId, history: &[ItemId], pool: &[&UserSequence]) -> Result<Vec<f64>> {
        let query: HashSet<&ItemId> = history.iter().collect();
        Ok(pool
            .iter()
            .map(|p| {
                let theirs: HashSet<&ItemId> = p.history.iter().collect();
                theirs.intersection(&query).count() as f64
            })
            .collect())
    }
}

/// Cosine similarity between embeddings of [`sequence_text`] renderings.
pub struct EmbeddingScorer<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: &'a EmbeddingCache,
    catalog: &'a Catalog,
}

impl<'a> EmbeddingScorer<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider, cache: &'a EmbeddingCache, catalog: &'a Catalog) -> Self {
        Self {
            provider,
            cache,
            catalog,
        }
    }

    /// Fetches embeddings for every pool history up front.
    pub fn warm<'p>(
        &self,
        pool: impl IntoIterator<Item = &'p UserSequence>,
        batch_size: usize,
        concurrency: usize,
    ) -> Result<usize> {
        let texts = pool
            .into_iter()
            .map(|p| sequence_text(&p.history, self.catalog))
            .collect::<Result<Vec<_>>>()?;
        embed_many(&texts, self.provider, self.cache, batch_size, concurrency)?;
        Ok(texts.len())
    }
}

impl SimilarityScorer for EmbeddingScorer<'_> {
    fn score_all(&self, _user: &UserId, history: &[ItemId], pool: &[&UserSequence]) -> Result<Vec<f64>> {
        let query = embed(&sequence_text(history, self.catalog)?, self.provider, self.cache)?;
        pool.iter()
            .map(|p| {
                let v = embed(&sequence_text(&p.history, self.catalog)?, self.provider, self.cache)?;
                cosine_similarity(&query, &v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub sequence: &'a UserSequence,
    pub score: f64,
}

/// Pool users in descending similarity; `neighbors[0]` is the most similar.
#[derive(Debug, Clone)]
pub struct RankedDemonstrations<'a> {
    pub neighbors: Vec<Neighbor<'a>>,
}

impl<'a> RankedDemonstrations<'a> {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn sequences(&self) -> Vec<&'a UserSequence> {
        self.neighbors.iter().map(|n| n.sequence).collect()
    }

    pub fn summary(&self) -> Vec<(UserId, f64)> {
        self.neighbors
            .iter()
            .map(|n| (n.sequence.user.clone(), n.score))
            .collect()
    }
}

/// Top-`k` pool entries by score, excluding the query user's own entry.
/// Equal scores are ordered by user id ascending.
pub fn select_demonstrations<'a>(
    user: &UserId,
    history: &[ItemId],
    pool: impl IntoIterator<Item = &'a UserSequence>,
    k: usize,
    scorer: &dyn SimilarityScorer,
) -> Result<RankedDemonstrations<'a>> {
    let pool: Vec<&UserSequence> = pool.into_iter().filter(|p| &p.user != user).collect();
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    if k > pool.len() {
        return Err(RetrievalError::PoolTooSmall {
            k,
            available: pool.len(),
        });
    }
    let scores = scorer.score_all(user, history, &pool)?;
    let mut neighbors: Vec<Neighbor> = pool
        .into_iter()
        .zip(scores)
        .map(|(sequence, score)| Neighbor { sequence, score })
        .collect();
    neighbors.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sequence.user.cmp(&b.sequence.user))
    });
    neighbors.truncate(k);
    Ok(RankedDemonstrations { neighbors })
}
