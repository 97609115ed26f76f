//! Surface-overlap (WordSim) and semantic-persistence (SPS) metrics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{jsonl, text_sha256};

/// Lowercased maximal runs of alphanumerics and apostrophes, in order.
pub fn word_token_seq(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Distinct word tokens of `text`.
pub fn word_tokens(text: &str) -> BTreeSet<String> {
    word_token_seq(text).into_iter().collect()
}

/// Jaccard similarity of the word-token sets. Two empty sets give 1.
pub fn jaccard_words(x: &str, y: &str) -> f64 {
    let a = word_tokens(x);
    let b = word_tokens(y);
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramUnit {
    /// Word trigrams over the token sequence.
    Word3,
    /// Character 5-grams over the raw lowercased text.
    Char5,
}

fn ngram_set(text: &str, unit: NgramUnit) -> HashSet<String> {
    match unit {
        NgramUnit::Word3 => word_token_seq(text)
            .windows(3)
            .map(|w| w.join(" "))
            .collect(),
        NgramUnit::Char5 => {
            let chars: Vec<char> = text.to_lowercase().chars().collect();
            chars.windows(5).map(|w| w.iter().collect()).collect()
        }
    }
}

/// Fraction of the distinct n-grams of `x` that also occur in `y`.
///
/// Normalized by `x`, so not symmetric. Zero n-grams in `x` gives 0.
pub fn ngram_overlap(x: &str, y: &str, unit: NgramUnit) -> f64 {
    let gx = ngram_set(x, unit);
    if gx.is_empty() {
        return 0.0;
    }
    let gy = ngram_set(y, unit);
    gx.iter().filter(|g| gy.contains(*g)).count() as f64 / gx.len() as f64
}

/// Mean of word Jaccard, word-trigram overlap and character 5-gram overlap.
pub fn word_sim(x: &str, y: &str) -> f64 {
    (jaccard_words(x, y)
        + ngram_overlap(x, y, NgramUnit::Word3)
        + ngram_overlap(x, y, NgramUnit::Char5))
        / 3.0
}

/// Nonnegative sparse activations: strictly increasing indices, strictly
/// positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureWire", into = "FeatureWire")]
pub struct SparseFeatureVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureWire {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<FeatureWire> for SparseFeatureVector {
    type Error = Error;
    fn try_from(w: FeatureWire) -> Result<Self> {
        SparseFeatureVector::from_parts(w.dim, w.indices, w.values)
    }
}

impl From<SparseFeatureVector> for FeatureWire {
    fn from(v: SparseFeatureVector) -> Self {
        FeatureWire {
            dim: v.dim,
            indices: v.indices,
            values: v.values,
        }
    }
}

impl SparseFeatureVector {
    pub fn from_parts(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dim must be positive"));
        }
        if indices.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("feature indices must be strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= dim) {
            return Err(Error::invalid("feature index out of range"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("feature values must be finite and strictly positive"));
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    /// Builds a vector from `(index, value)` pairs, sorting them and dropping
    /// zero entries.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut e: Vec<_> = entries.into_iter().filter(|&(_, v)| v != 0.0).collect();
        e.sort_by_key(|&(i, _)| i);
        let (indices, values) = e.into_iter().unzip();
        Self::from_parts(dim, indices, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            d[i] = v;
        }
        d
    }
}

/// Cosine similarity over the shared active indices. A zero norm gives 0.
pub fn cosine_sparse(f: &SparseFeatureVector, g: &SparseFeatureVector) -> Result<f64> {
    if f.dim != g.dim {
        return Err(Error::DimensionMismatch(f.dim, g.dim));
    }
    let (nf, ng) = (f.norm(), g.norm());
    if nf == 0.0 || ng == 0.0 {
        return Ok(0.0);
    }
    // Exact for identical vectors, where norm rounding could land a ulp low.
    if f.indices == g.indices && f.values == g.values {
        return Ok(1.0);
    }
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < f.indices.len() && j < g.indices.len() {
        match f.indices[i].cmp(&g.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += f.values[i] * g.values[j];
                i += 1;
                j += 1;
            }
        }
    }
    Ok((dot / (nf * ng)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    FileBacked,
    ServiceBacked,
}

/// The semantic oracle boundary: maps texts to sparse feature vectors.
pub trait FeatureProvider: Send + Sync {
    /// One vector per input text, in input order.
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>>;

    fn source(&self) -> FeatureSource;
}

impl<P: FeatureProvider + ?Sized> FeatureProvider for &P {
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        (**self).fetch(texts)
    }
    fn source(&self) -> FeatureSource {
        (**self).source()
    }
}

/// One line of a feature file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub text_sha256: String,
    #[serde(flatten)]
    pub vector: SparseFeatureVector,
}

/// Read-only provider over a feature file keyed by SHA-256 of the text.
#[derive(Debug, Default)]
pub struct FileFeatureProvider {
    by_hash: HashMap<String, SparseFeatureVector>,
}

impl FileFeatureProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<FeatureRecord> = jsonl::read(path)?;
        Ok(Self::from_records(records))
    }

    pub fn from_records(records: impl IntoIterator<Item = FeatureRecord>) -> Self {
        Self {
            by_hash: records
                .into_iter()
                .map(|r| (r.text_sha256, r.vector))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

impl FeatureProvider for FileFeatureProvider {
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let key = text_sha256(t);
                self.by_hash.get(&key).cloned().ok_or_else(|| Error::Provider {
                    index,
                    message: format!("no features for text sha256 {key}"),
                })
            })
            .collect()
    }

    fn source(&self) -> FeatureSource {
        FeatureSource::FileBacked
    }
}

/// Memoizes another provider by exact text bytes and counts the texts it
/// had to forward.
pub struct CachingProvider<P> {
    inner: P,
    cache: Mutex<HashMap<String, SparseFeatureVector>>,
    forwarded: AtomicUsize,
}

impl<P: FeatureProvider> CachingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            forwarded: AtomicUsize::new(0),
        }
    }

    /// Number of texts sent to the wrapped provider so far.
    pub fn forwarded(&self) -> usize {
        self.forwarded.load(Ordering::Relaxed)
    }
}

impl<P: FeatureProvider> FeatureProvider for CachingProvider<P> {
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("feature cache poisoned");
            let mut seen = HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let fetched = self.inner.fetch(&missing)?;
            self.forwarded.fetch_add(missing.len(), Ordering::Relaxed);
            let mut cache = self.cache.lock().expect("feature cache poisoned");
            for (t, v) in missing.into_iter().zip(fetched) {
                cache.entry(t.to_owned()).or_insert(v);
            }
        }
        let cache = self.cache.lock().expect("feature cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn source(&self) -> FeatureSource {
        self.inner.source()
    }
}

/// Semantic and surface scores for one candidate, plus their difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub sps: f64,
    pub wordsim: f64,
    pub utility: f64,
}

impl MetricPair {
    pub fn new(sps: f64, wordsim: f64) -> Self {
        Self {
            sps,
            wordsim,
            utility: sps - wordsim,
        }
    }
}

/// Per-span cosine similarities between aligned span lists.
pub fn span_cosines(
    x_spans: &[&str],
    y_spans: &[&str],
    provider: &dyn FeatureProvider,
) -> Result<Vec<f64>> {
    if x_spans.len() != y_spans.len() {
        return Err(Error::SpanCountMismatch(x_spans.len(), y_spans.len()));
    }
    if x_spans.is_empty() {
        return Err(Error::NoEvaluablePairs("zero spans".into()));
    }
    x_spans
        .iter()
        .zip(y_spans)
        .enumerate()
        .map(|(index, (x, y))| {
            let fv = provider.fetch(&[x, y]).map_err(|e| match e {
                Error::Provider { message, .. } => Error::Provider { index, message },
                other => Error::Provider {
                    index,
                    message: other.to_string(),
                },
            })?;
            if fv.len() != 2 {
                return Err(Error::Provider {
                    index,
                    message: format!("expected 2 vectors, got {}", fv.len()),
                });
            }
            cosine_sparse(&fv[0], &fv[1])
        })
        .collect()
}

/// Mean cosine similarity of feature vectors over aligned spans.
pub fn sps(x_spans: &[&str], y_spans: &[&str], provider: &dyn FeatureProvider) -> Result<f64> {
    let cos = span_cosines(x_spans, y_spans, provider)?;
    Ok(cos.iter().sum::<f64>() / cos.len() as f64)
}
