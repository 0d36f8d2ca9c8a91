//! Encoder providers and concatenated embeddings.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::http::{post_json, HttpError};

/// Maps text to a fixed-length dense vector. Implementations must be
/// deterministic for a fixed configuration.
pub trait EncoderProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector per input text, in order. Length checks are done by callers.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

impl<P: EncoderProvider + ?Sized> EncoderProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        (**self).embed_batch(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provenance: Vec<(String, usize)>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Part `i` as recorded in the provenance.
    pub fn slice(&self, i: usize) -> Option<EmbeddingVector> {
        let (name, dim) = self.provenance.get(i)?;
        let start: usize = self.provenance[..i].iter().map(|(_, d)| d).sum();
        Some(EmbeddingVector {
            values: self.values[start..start + dim].to_vec(),
            provenance: vec![(name.clone(), *dim)],
        })
    }

    pub fn parts(&self) -> Vec<EmbeddingVector> {
        (0..self.provenance.len()).filter_map(|i| self.slice(i)).collect()
    }
}

pub fn concat(parts: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    if parts.is_empty() {
        return Err(Error::Precondition("concat needs at least one part".into()));
    }
    let mut out = EmbeddingVector {
        values: Vec::with_capacity(parts.iter().map(|p| p.dim()).sum()),
        provenance: Vec::new(),
    };
    for p in parts {
        out.values.extend_from_slice(&p.values);
        out.provenance.extend(p.provenance.iter().cloned());
    }
    Ok(out)
}

fn check_dim(provider: &dyn EncoderProvider, got: usize) -> Result<()> {
    if got != provider.dim() {
        return Err(Error::Integrity(format!(
            "provider {} returned a vector of length {got}, expected {}",
            provider.name(),
            provider.dim()
        )));
    }
    Ok(())
}

pub fn embed(provider: &dyn EncoderProvider, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::Precondition("cannot embed empty text".into()));
    }
    let mut out = provider.embed_batch(&[text])?;
    if out.len() != 1 {
        return Err(Error::Integrity(format!(
            "provider {} returned {} vectors for 1 text",
            provider.name(),
            out.len()
        )));
    }
    let values = out.pop().unwrap();
    check_dim(provider, values.len())?;
    Ok(EmbeddingVector {
        values,
        provenance: vec![(provider.name().to_string(), provider.dim())],
    })
}

/// Embeds every text into one row of a `texts.len() x dim` matrix, calling
/// the provider on batches of `batch_size` with up to `parallelism` batches
/// in flight.
pub fn embed_matrix(
    provider: &dyn EncoderProvider,
    texts: &[&str],
    batch_size: usize,
    parallelism: usize,
) -> Result<Array2<f64>> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::Precondition(format!("text {i} is empty")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let batches: Vec<Vec<Vec<f64>>> = pool.install(|| {
        texts
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let out = provider.embed_batch(chunk)?;
                if out.len() != chunk.len() {
                    return Err(Error::Integrity(format!(
                        "provider {} returned {} vectors for {} texts",
                        provider.name(),
                        out.len(),
                        chunk.len()
                    )));
                }
                for v in &out {
                    check_dim(provider, v.len())?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()
    })?;
    let dim = provider.dim();
    let flat: Vec<f64> = batches.into_iter().flatten().flatten().collect();
    Ok(Array2::from_shape_vec((texts.len(), dim), flat).expect("shape checked per row"))
}

/// Column-wise concatenation of per-provider matrices.
pub fn concat_matrices(parts: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Err(Error::Precondition("concat needs at least one part".into()));
    }
    let rows = parts[0].nrows();
    if let Some(p) = parts.iter().find(|p| p.nrows() != rows) {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: p.nrows(),
        });
    }
    Ok(concatenate(Axis(1), parts).expect("row counts checked"))
}

/// The prompt-style wrapper used for pattern-based variants.
pub fn pet_template(text: &str) -> String {
    format!("Essay: {text} Quality:")
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of lowercased word unigrams and bigrams,
/// L2-normalized. Needs no model files; used for tests and smoke runs.
#[derive(Debug, Clone)]
pub struct HashProjection {
    name: String,
    dim: usize,
    seed: u64,
}

impl HashProjection {
    pub fn new(name: impl Into<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("dim must be >= 1".into()));
        }
        Ok(HashProjection {
            name: name.into(),
            dim,
            seed,
        })
    }

    fn project(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut add = |key: &[u8]| {
            let h = fnv1a(self.seed, key);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        };
        for w in &words {
            add(w.as_bytes());
        }
        for pair in words.windows(2) {
            add(format!("{} {}", pair[0], pair[1]).as_bytes());
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EncoderProvider for HashProjection {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.project(t)).collect())
    }
}

/// Key of a text in replay tables and the embedding cache.
pub fn text_hash(text: &str) -> String {
    crate::sha256_hex(&[text.as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayVector {
    pub hash: String,
    pub vector: Vec<f64>,
}

/// Serves pre-recorded vectors looked up by [`text_hash`].
#[derive(Debug, Clone)]
pub struct FileReplay {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileReplay {
    pub fn new(name: impl Into<String>, dim: usize, entries: impl IntoIterator<Item = ReplayVector>) -> Self {
        FileReplay {
            name: name.into(),
            dim,
            table: entries.into_iter().map(|e| (e.hash, e.vector)).collect(),
        }
    }

    /// JSONL, one `{"hash": ..., "vector": [...]}` per line.
    pub fn load(name: impl Into<String>, dim: usize, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<ReplayVector>(&line).map_err(|e| Error::Row {
                row: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(name, dim, entries))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

pub fn write_replay_vectors(path: impl AsRef<Path>, entries: &[ReplayVector]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl EncoderProvider for FileReplay {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let h = text_hash(t);
                self.table.get(&h).cloned().ok_or_else(|| Error::Provider {
                    provider: self.name.clone(),
                    message: format!("no recorded vector for text hash {h}"),
                })
            })
            .collect()
    }
}

/// Remote encoder: `POST {"texts": [...]}` answered by `{"vectors": [[...]]}`.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    name: String,
    dim: usize,
    url: String,
    timeout: Duration,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(name: impl Into<String>, dim: usize, url: impl Into<String>) -> Self {
        HttpProvider {
            name: name.into(),
            dim,
            url: url.into(),
            timeout: Duration::from_secs(60),
            api_key: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl EncoderProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let err = |message: String| Error::Provider {
            provider: self.name.clone(),
            message,
        };
        let body = json!({ "texts": texts });
        let resp = post_json(&self.url, &body, self.api_key.as_deref(), self.timeout).map_err(|e| match e {
            HttpError::Transport(m) | HttpError::Rejected(m) => err(m),
        })?;
        let vectors = resp
            .get("vectors")
            .cloned()
            .ok_or_else(|| err("response has no \"vectors\" field".into()))?;
        serde_json::from_value(vectors).map_err(|e| err(format!("malformed vectors: {e}")))
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Disk cache in front of another provider, keyed by provider name and text.
/// Values are stored as raw little-endian `f64`s.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: EncoderProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CachedProvider { inner, dir })
    }

    fn path_for(&self, text: &str) -> PathBuf {
        self.dir
            .join(crate::sha256_hex(&[self.inner.name().as_bytes(), text.as_bytes()]))
    }

    fn read(&self, path: &Path) -> Option<Vec<f64>> {
        let raw = fs::read(path).ok()?;
        if raw.len() != self.inner.dim() * 8 {
            return None;
        }
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    fn write(&self, path: &Path, v: &[f64]) -> Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("{}.{n}.tmp", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

impl<P: EncoderProvider> EncoderProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let paths: Vec<PathBuf> = texts.iter().map(|t| self.path_for(t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = paths.iter().map(|p| self.read(p)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.embed_batch(&batch)?;
            if fresh.len() != batch.len() {
                return Err(Error::Integrity(format!(
                    "provider {} returned {} vectors for {} texts",
                    self.name(),
                    fresh.len(),
                    batch.len()
                )));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                check_dim(self, v.len())?;
                self.write(&paths[i], &v)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    FixtureHash {
        name: String,
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    FileReplay {
        name: String,
        dim: usize,
        path: PathBuf,
    },
    Http {
        name: String,
        dim: usize,
        url: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        /// Environment variable holding a bearer token, if any.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_timeout_secs() -> u64 {
    60
}

impl ProviderConfig {
    pub fn name(&self) -> &str {
        match self {
            ProviderConfig::FixtureHash { name, .. }
            | ProviderConfig::FileReplay { name, .. }
            | ProviderConfig::Http { name, .. } => name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProviderConfig::FixtureHash { dim, .. }
            | ProviderConfig::FileReplay { dim, .. }
            | ProviderConfig::Http { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn EncoderProvider>> {
        Ok(match self {
            ProviderConfig::FixtureHash { name, dim, seed } => Box::new(HashProjection::new(name.clone(), *dim, *seed)?),
            ProviderConfig::FileReplay { name, dim, path } => Box::new(FileReplay::load(name.clone(), *dim, path)?),
            ProviderConfig::Http {
                name,
                dim,
                url,
                timeout_secs,
                api_key_env,
            } => Box::new(
                HttpProvider::new(name.clone(), *dim, url.clone())
                    .with_timeout(Duration::from_secs(*timeout_secs))
                    .with_api_key(api_key_env.as_ref().and_then(|k| std::env::var(k).ok())),
            ),
        })
    }

    /// Like [`ProviderConfig::build`], wrapped in a disk cache under `dir`.
    pub fn build_cached(&self, dir: impl Into<PathBuf>) -> Result<Box<dyn EncoderProvider>> {
        Ok(Box::new(CachedProvider::new(self.build()?, dir)?))
    }
}
