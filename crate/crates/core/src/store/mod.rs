//! Example-image embedding pool.
//!
//! Records go into a [`StoreBuilder`] (single writer), which is then frozen
//! into an [`EmbeddingStore`] that answers similarity queries and can be
//! shared freely across threads. All vectors are L2-normalized on the way in,
//! so cosine similarity is a plain dot product and Euclidean order agrees with
//! cosine order.
//!
//! On disk a store is a directory with `meta.jsonl` (one record per line,
//! without the vector) and `vectors.f32` (little-endian `f32`, row-major, in
//! the same order as `meta.jsonl`). The HNSW graph is rebuilt on load.

mod hnsw;
pub mod manifest;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hnsw::HnswParams;
use hnsw::{Hnsw, Rows};

pub const META_FILE: &str = "meta.jsonl";
pub const VECTORS_FILE: &str = "vectors.f32";

/// Tolerance on `‖v‖₂ = 1` for stored vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate id(s): {}", .0.join(", "))]
    DuplicateId(Vec<String>),
    #[error("no record satisfies the filter")]
    EmptyStore,
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("record `{0}` has no labels")]
    NoLabels(String),
    #[error("unknown record id `{0}`")]
    UnknownId(String),
    #[error("n must be at least 1")]
    ZeroCount,
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One example image: identity, split, labels and its unit embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub uri: String,
    pub labels: BTreeSet<String>,
    pub split: Split,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    /// Builds a record, normalizing `vector` to unit length.
    pub fn new(
        id: impl Into<String>,
        uri: impl Into<String>,
        labels: impl IntoIterator<Item = impl Into<String>>,
        split: Split,
        vector: Vec<f32>,
    ) -> Result<Self, StoreError> {
        let id = id.into();
        let labels: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(StoreError::NoLabels(id));
        }
        Ok(Self {
            id,
            uri: uri.into(),
            labels,
            split,
            vector: normalize(&vector)?,
        })
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.contains(label)
    }
}

/// A search result: record id and its cosine similarity to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub similarity: f32,
}

/// Metadata predicate applied during search.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub split: Option<Split>,
    pub label: Option<String>,
    pub exclude_ids: BTreeSet<String>,
}

impl Filter {
    pub fn split(split: Split) -> Self {
        Self {
            split: Some(split),
            ..Self::default()
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn excluding(mut self, id: impl Into<String>) -> Self {
        self.exclude_ids.insert(id.into());
        self
    }

    pub fn matches(&self, record: &EmbeddingRecord) -> bool {
        self.split.is_none_or(|s| s == record.split)
            && self.label.as_deref().is_none_or(|l| record.has_label(l))
            && !self.exclude_ids.contains(&record.id)
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `v / ‖v‖₂`, computed in `f64`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, StoreError> {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(StoreError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::ZeroVector);
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

fn rank_hits(mut hits: Vec<SearchHit>, n: usize) -> Vec<SearchHit> {
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.id.cmp(&b.id))
    });
    hits.truncate(n);
    hits
}

/// Mutable build phase of the store.
#[derive(Debug)]
pub struct StoreBuilder {
    dim: usize,
    params: HnswParams,
    records: Vec<EmbeddingRecord>,
    index_of: HashMap<String, usize>,
}

impl StoreBuilder {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, HnswParams::default())
    }

    pub fn with_params(dim: usize, params: HnswParams) -> Self {
        Self {
            dim,
            params,
            records: Vec::new(),
            index_of: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), StoreError> {
        if record.vector.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                found: record.vector.len(),
            });
        }
        if self.index_of.contains_key(&record.id) {
            return Err(StoreError::DuplicateId(vec![record.id]));
        }
        let norm = record
            .vector
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        let record = if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            EmbeddingRecord {
                vector: normalize(&record.vector)?,
                ..record
            }
        } else {
            record
        };
        self.index_of.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index_of.get(id).map(|&i| &self.records[i])
    }

    /// Ends the build phase and constructs the search index.
    pub fn freeze(self) -> EmbeddingStore {
        let flat: Vec<f32> = self
            .records
            .iter()
            .flat_map(|r| r.vector.iter().copied())
            .collect();
        let index = Hnsw::build(
            &Rows {
                data: &flat,
                dim: self.dim,
            },
            self.params,
        );
        EmbeddingStore {
            dim: self.dim,
            records: self.records,
            index_of: self.index_of,
            flat,
            index,
        }
    }
}

/// Frozen, read-only store. `Send + Sync`.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index_of: HashMap<String, usize>,
    flat: Vec<f32>,
    index: Hnsw,
}

impl EmbeddingStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn params(&self) -> HnswParams {
        self.index.params()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index_of.get(id).map(|&i| &self.records[i])
    }

    /// Records in insertion order.
    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn iter_filtered<'a>(
        &'a self,
        filter: &'a Filter,
    ) -> impl Iterator<Item = &'a EmbeddingRecord> + 'a {
        self.records.iter().filter(move |r| filter.matches(r))
    }

    fn check_query(&self, query: &[f32], n: usize) -> Result<(), StoreError> {
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        if n == 0 {
            return Err(StoreError::ZeroCount);
        }
        Ok(())
    }

    /// Approximate k-nearest neighbours through the HNSW graph.
    pub fn search_knn(
        &self,
        query: &[f32],
        n: usize,
        filter: Option<&Filter>,
    ) -> Result<Vec<SearchHit>, StoreError> {
        self.search_knn_ef(query, n, filter, self.index.params().ef_search)
    }

    /// As [`search_knn`](Self::search_knn) with an explicit beam width.
    pub fn search_knn_ef(
        &self,
        query: &[f32],
        n: usize,
        filter: Option<&Filter>,
        ef: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        self.check_query(query, n)?;
        let admit = |node: u32| filter.is_none_or(|f| f.matches(&self.records[node as usize]));
        let eligible = match filter {
            None => self.records.len(),
            Some(f) => self.iter_filtered(f).count(),
        };
        if eligible == 0 {
            return Err(StoreError::EmptyStore);
        }
        let rows = Rows {
            data: &self.flat,
            dim: self.dim,
        };
        let found = self.index.search(&rows, query, n, ef, &admit);
        if found.len() < n.min(eligible) {
            // graph could not reach enough admitted nodes
            return self.exact_search(query, n, filter);
        }
        let hits = found
            .into_iter()
            .map(|(node, similarity)| SearchHit {
                id: self.records[node as usize].id.clone(),
                similarity,
            })
            .collect();
        Ok(rank_hits(hits, n))
    }

    /// Exhaustive scan; the reference the approximate index is checked against.
    pub fn exact_search(
        &self,
        query: &[f32],
        n: usize,
        filter: Option<&Filter>,
    ) -> Result<Vec<SearchHit>, StoreError> {
        self.check_query(query, n)?;
        let hits: Vec<SearchHit> = self
            .records
            .iter()
            .filter(|r| filter.is_none_or(|f| f.matches(r)))
            .map(|r| SearchHit {
                id: r.id.clone(),
                similarity: dot(query, &r.vector),
            })
            .collect();
        if hits.is_empty() {
            return Err(StoreError::EmptyStore);
        }
        Ok(rank_hits(hits, n))
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        let mut meta = BufWriter::new(fs::File::create(dir.join(META_FILE))?);
        let mut vecs = BufWriter::new(fs::File::create(dir.join(VECTORS_FILE))?);
        for r in &self.records {
            let line = serde_json::to_string(&MetaLine {
                id: &r.id,
                uri: &r.uri,
                labels: &r.labels,
                split: r.split,
            })
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
            writeln!(meta, "{line}")?;
            for x in &r.vector {
                vecs.write_all(&x.to_le_bytes())?;
            }
        }
        meta.flush()?;
        vecs.flush()?;
        Ok(())
    }

    /// Loads a saved store and rebuilds its index with `params`.
    pub fn load(dir: &Path, params: HnswParams) -> Result<Self, StoreError> {
        let meta = BufReader::new(fs::File::open(dir.join(META_FILE))?);
        let mut entries = Vec::new();
        for (i, line) in meta.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: OwnedMetaLine = serde_json::from_str(&line)
                .map_err(|e| StoreError::Corrupt(format!("{META_FILE} line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        let bytes = fs::read(dir.join(VECTORS_FILE))?;
        if entries.is_empty() {
            return Err(StoreError::Corrupt("store has no records".into()));
        }
        if bytes.len() % (4 * entries.len()) != 0 {
            return Err(StoreError::Corrupt(format!(
                "{VECTORS_FILE} holds {} bytes, not a whole number of rows for {} records",
                bytes.len(),
                entries.len()
            )));
        }
        let dim = bytes.len() / (4 * entries.len());
        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut builder = StoreBuilder::with_params(dim, params);
        for e in entries {
            let vector: Vec<f32> = floats.by_ref().take(dim).collect();
            // stored vectors are already unit length; keep them bit-exact
            builder.insert(EmbeddingRecord {
                id: e.id,
                uri: e.uri,
                labels: e.labels,
                split: e.split,
                vector,
            })?;
        }
        Ok(builder.freeze())
    }
}

#[derive(Serialize)]
struct MetaLine<'a> {
    id: &'a str,
    uri: &'a str,
    labels: &'a BTreeSet<String>,
    split: Split,
}

#[derive(Deserialize)]
struct OwnedMetaLine {
    id: String,
    uri: String,
    labels: BTreeSet<String>,
    split: Split,
}
