//! Exact cosine-similarity search over fused vectors and soft labels from
//! the retrieved neighbors.
//!
//! `XDZI` layout (little-endian): magic `XDZI`, version `u32 = 1`,
//! `count u64`, `dim u32`, then per entry `id_len u16` + UTF-8 id,
//! `label i32`, and the unit-norm key as `dim × f32`.

use std::cmp::Ordering;
use std::path::Path;

use crate::binio::{write_atomic, ByteReader, ByteWriter, FormatError, FORMAT_VERSION};
use crate::fusion::ProbVector;
use crate::math::{argmax, l2_normalize, MathError};

pub const XDZI_MAGIC: &[u8; 4] = b"XDZI";
/// Stored keys must have unit norm to within this much.
const KEY_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vector for {0:?} has zero norm")]
    ZeroVector(String),
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("no index entries for classes {0:?}")]
    ClassMissing(Vec<usize>),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub label: usize,
    key: Vec<f32>,
}

impl IndexEntry {
    /// Unit-norm key.
    pub fn key(&self) -> &[f32] {
        &self.key
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub label: usize,
    pub similarity: f64,
    /// Insertion position in the index.
    pub position: usize,
}

/// Neighbors in descending similarity, earlier insertion first on ties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet(Vec<Neighbor>);

impl NeighborSet {
    pub fn new(neighbors: Vec<Neighbor>) -> Self {
        Self(neighbors)
    }

    pub fn as_slice(&self) -> &[Neighbor] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.0.iter()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|n| n.id.as_str()).collect()
    }
}

/// Per-class retrieval result. Classes with no entries are listed in
/// `missing_classes` and contribute no block.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassNeighbors {
    pub neighbors: NeighborSet,
    pub missing_classes: Vec<usize>,
}

impl PerClassNeighbors {
    pub fn is_complete(&self) -> bool {
        self.missing_classes.is_empty()
    }

    /// Turns missing classes into an error.
    pub fn require_all(self) -> Result<NeighborSet, RetrievalError> {
        if self.missing_classes.is_empty() {
            Ok(self.neighbors)
        } else {
            Err(RetrievalError::ClassMissing(self.missing_classes))
        }
    }
}

/// How neighbors vote in [`aggregate_labels`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Weight by clamped cosine similarity.
    #[default]
    Similarity,
    /// Every neighbor counts once (majority vote).
    Uniform,
}

/// Exact flat index. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

fn normalize(id: &str, v: &[f64]) -> Result<Vec<f64>, RetrievalError> {
    l2_normalize(v).map_err(|e| match e {
        MathError::ZeroVector => RetrievalError::ZeroVector(id.to_string()),
        other => RetrievalError::ZeroVector(format!("{id}: {other}")),
    })
}

fn similarity(key: &[f32], query: &[f64]) -> f64 {
    key.iter().zip(query).map(|(&k, &q)| k as f64 * q).sum()
}

/// Descending similarity, then ascending insertion position.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn best_k(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank);
    scored
}

impl FlatIndex {
    /// Normalizes and stores every `(id, label, vector)`. Duplicate ids are
    /// accepted.
    pub fn build<I>(entries: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (String, usize, Vec<f64>)>,
    {
        let mut index = FlatIndex::default();
        for (id, label, v) in entries {
            if index.entries.is_empty() {
                index.dim = v.len();
            } else if v.len() != index.dim {
                return Err(RetrievalError::DimensionMismatch { expected: index.dim, actual: v.len() });
            }
            let key = normalize(&id, &v)?.into_iter().map(|x| x as f32).collect();
            index.entries.push(IndexEntry { id, label, key });
        }
        Ok(index)
    }

    /// Key dimension; 0 for an empty index.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn prepare_query(&self, query: &[f64], k: usize) -> Result<Vec<f64>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if !self.is_empty() && query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, actual: query.len() });
        }
        normalize("query", query)
    }

    fn neighbor(&self, (similarity, position): (f64, usize)) -> Neighbor {
        let e = &self.entries[position];
        Neighbor { id: e.id.clone(), label: e.label, similarity, position }
    }

    /// The `min(k, len)` entries most similar to `query`. An empty index
    /// yields an empty set.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<NeighborSet, RetrievalError> {
        let q = self.prepare_query(query, k)?;
        let scored = self.entries.iter().enumerate().map(|(i, e)| (similarity(&e.key, &q), i)).collect();
        Ok(NeighborSet(best_k(scored, k).into_iter().map(|s| self.neighbor(s)).collect()))
    }

    /// Up to `k` most similar entries of each class `0..num_classes`, class
    /// blocks concatenated in class order.
    pub fn top_k_per_class(
        &self,
        query: &[f64],
        k: usize,
        num_classes: usize,
    ) -> Result<PerClassNeighbors, RetrievalError> {
        let q = self.prepare_query(query, k)?;
        let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); num_classes];
        for (i, e) in self.entries.iter().enumerate() {
            if e.label >= num_classes {
                return Err(RetrievalError::LabelOutOfRange { label: e.label, num_classes });
            }
            per_class[e.label].push((similarity(&e.key, &q), i));
        }
        let mut neighbors = Vec::with_capacity(k * num_classes);
        let mut missing_classes = Vec::new();
        for (c, scored) in per_class.into_iter().enumerate() {
            if scored.is_empty() {
                missing_classes.push(c);
            }
            neighbors.extend(best_k(scored, k).into_iter().map(|s| self.neighbor(s)));
        }
        Ok(PerClassNeighbors { neighbors: NeighborSet(neighbors), missing_classes })
    }
}

/// `ŷ[c] = Σ_j [y_j = c]·s_j⁺ / Σ_j s_j⁺` with `s⁺ = max(s, 0)`. Uniform when
/// every weight is zero.
pub fn aggregate_labels(
    neighbors: &NeighborSet,
    num_classes: usize,
    weighting: Weighting,
) -> Result<ProbVector, RetrievalError> {
    if neighbors.is_empty() {
        return Err(RetrievalError::EmptyNeighborSet);
    }
    let mut mass = vec![0.0; num_classes];
    for n in neighbors.iter() {
        if n.label >= num_classes {
            return Err(RetrievalError::LabelOutOfRange { label: n.label, num_classes });
        }
        mass[n.label] += match weighting {
            Weighting::Similarity => n.similarity.max(0.0),
            Weighting::Uniform => 1.0,
        };
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(ProbVector::uniform(num_classes));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(ProbVector::new_unchecked(mass))
}

/// Label of the best aggregated class over the global top-k.
pub fn predict_knn(
    index: &FlatIndex,
    query: &[f64],
    k: usize,
    num_classes: usize,
    weighting: Weighting,
) -> Result<(usize, ProbVector), RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let probs = aggregate_labels(&index.top_k(query, k)?, num_classes, weighting)?;
    Ok((argmax(probs.as_slice()), probs))
}

pub fn encode_index(index: &FlatIndex) -> Result<Vec<u8>, FormatError> {
    let mut w = ByteWriter::new();
    w.bytes(XDZI_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(index.len() as u64);
    w.u32(index.dim as u32);
    for e in &index.entries {
        w.short_str(&e.id)?;
        w.i32(e.label as i32);
        e.key.iter().for_each(|&x| w.f32(x));
    }
    Ok(w.into_inner())
}

pub fn decode_index(bytes: &[u8]) -> Result<FlatIndex, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(XDZI_MAGIC)?;
    r.version()?;
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = r.utf8(len)?;
        let label = r.i32()?;
        if label < 0 {
            return Err(FormatError::InvalidContent(format!("entry {id:?} has negative label {label}")));
        }
        let key = r.f32s(dim)?;
        let norm = key.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > KEY_NORM_TOLERANCE {
            return Err(FormatError::InvalidContent(format!("entry {id:?} key norm {norm}")));
        }
        entries.push(IndexEntry { id, label: label as usize, key });
    }
    r.finish()?;
    Ok(FlatIndex { dim, entries })
}

pub fn load_index(path: impl AsRef<Path>) -> Result<FlatIndex, FormatError> {
    decode_index(&std::fs::read(path)?)
}

pub fn save_index(path: impl AsRef<Path>, index: &FlatIndex) -> Result<(), FormatError> {
    write_atomic(path.as_ref(), &encode_index(index)?)?;
    Ok(())
}
