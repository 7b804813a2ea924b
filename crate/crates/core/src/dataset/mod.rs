//! Embedding records, the label taxonomy, MIMOSA→BHM remapping, stratified
//! splitting and class weights.

mod remap;
mod split;
mod xdem;

use serde::{Deserialize, Serialize};

use crate::math::Matrix;

pub use remap::{remap_label, remap_manifest, ManifestEntry, RemapAction, RemapOutcome, RemapRow, RemapRules};
pub use split::{split_counts, stratified_split, stratified_split_records, SplitCounts, SplitIndices, SplitSpec};
pub use xdem::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, XDEM_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("unknown source label {0:?}")]
    UnknownSourceLabel(String),
    #[error("class {class} has {count} members; at least {min} are required")]
    ClassTooSmall { class: usize, count: usize, min: usize },
    #[error("class {0} has no members")]
    EmptyClass(usize),
    #[error("record {0:?} is unlabeled")]
    Unlabeled(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid split fractions {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("invalid keep fraction {0}")]
    InvalidKeepFraction(f64),
}

/// Which classification problem a label space belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Hateful vs. non-hateful.
    Task1,
    /// Hate target: individual, community, organization, society.
    Task2,
}

impl Task {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Task1 => &["Non-Hate", "Hate"],
            Task::Task2 => &["TI", "TC", "TO", "TS"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn class_name(self, class: usize) -> Option<&'static str> {
        self.class_names().get(class).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Task1 => "task1",
            Task::Task2 => "task2",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "task1" | "1" => Ok(Task::Task1),
            "task2" | "2" => Ok(Task::Task2),
            other => Err(format!("unknown task {other:?} (expected task1 or task2)")),
        }
    }
}

pub mod classes {
    //! Class indices for both tasks.
    pub const NON_HATE: usize = 0;
    pub const HATE: usize = 1;
    pub const TI: usize = 0;
    pub const TC: usize = 1;
    pub const TO: usize = 2;
    pub const TS: usize = 3;
}

/// Shape shared by every record in an embedding file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub d_v: usize,
    pub seq_len: usize,
    pub d_t: usize,
}

/// One sample's precomputed encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    /// `None` for inference-only records (stored as −1).
    pub label: Option<usize>,
    pub image_embedding: Vec<f32>,
    /// `seq_len × d_t`, row-major.
    pub token_embeddings: Vec<f32>,
    /// `true` marks a real token, `false` padding.
    pub attention_mask: Vec<bool>,
    pub caption: Option<String>,
}

impl EmbeddingRecord {
    pub fn image_vector(&self) -> Vec<f64> {
        self.image_embedding.iter().map(|&x| x as f64).collect()
    }

    pub fn token_matrix(&self, dims: &EmbeddingDims) -> Matrix {
        Matrix::from_vec(dims.seq_len, dims.d_t, self.token_embeddings.iter().map(|&x| x as f64).collect())
            .expect("record validated against dims")
    }

    /// Checks shapes and content against `dims`.
    pub fn validate(&self, dims: &EmbeddingDims) -> Result<(), String> {
        if self.image_embedding.len() != dims.d_v {
            return Err(format!(
                "record {:?}: image embedding has {} values, expected {}",
                self.id,
                self.image_embedding.len(),
                dims.d_v
            ));
        }
        if self.token_embeddings.len() != dims.seq_len * dims.d_t {
            return Err(format!(
                "record {:?}: token embeddings have {} values, expected {}",
                self.id,
                self.token_embeddings.len(),
                dims.seq_len * dims.d_t
            ));
        }
        if self.attention_mask.len() != dims.seq_len {
            return Err(format!(
                "record {:?}: mask has {} flags, expected {}",
                self.id,
                self.attention_mask.len(),
                dims.seq_len
            ));
        }
        if !self.attention_mask.iter().any(|&m| m) {
            return Err(format!("record {:?}: attention mask has no real token", self.id));
        }
        if !self.image_embedding.iter().chain(&self.token_embeddings).all(|x| x.is_finite()) {
            return Err(format!("record {:?}: non-finite embedding value", self.id));
        }
        Ok(())
    }
}

/// The contents of one embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dims: EmbeddingDims,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dims: EmbeddingDims) -> Self {
        Self { dims, records: Vec::new() }
    }

    pub fn has_captions(&self) -> bool {
        self.records.iter().any(|r| r.caption.is_some())
    }

    /// Labels of all records, failing on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<usize>, DatasetError> {
        self.records.iter().map(|r| r.label.ok_or_else(|| DatasetError::Unlabeled(r.id.clone()))).collect()
    }

    /// Copies the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet { dims: self.dims, records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }
}

/// Inverse-frequency weights `N / (C · n_c)`.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>, DatasetError> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(DatasetError::LabelOutOfRange { label: l, num_classes });
        }
        counts[l] += 1;
    }
    class_weights_from_counts(&counts)
}

pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>, DatasetError> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(DatasetError::EmptyClass(c));
    }
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (c * n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_for_task1_train_counts() {
        // Hate 3885 / Non-Hate 3588, listed in that order.
        let w = class_weights_from_counts(&[3885, 3588]).unwrap();
        assert!((w[0] - 0.9618).abs() < 1e-4, "{w:?}");
        assert!((w[1] - 1.0414).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn balanced_and_empty() {
        assert_eq!(
            class_weights(&[0; 10].iter().chain(&[1; 10]).copied().collect::<Vec<_>>(), 2).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(matches!(class_weights_from_counts(&[10, 0]), Err(DatasetError::EmptyClass(1))));
        assert!(matches!(class_weights(&[0, 2], 2), Err(DatasetError::LabelOutOfRange { .. })));
    }

    #[test]
    fn task2_order_matches_target_switch() {
        assert_eq!(Task::Task2.class_names(), &["TI", "TC", "TO", "TS"]);
        assert_eq!(Task::Task1.class_name(classes::HATE), Some("Hate"));
    }

    proptest! {
        #[test]
        fn weighted_counts_sum_to_total(counts in prop::collection::vec(1usize..5000, 2..6)) {
            let w = class_weights_from_counts(&counts).unwrap();
            let total: usize = counts.iter().sum();
            let s: f64 = counts.iter().zip(&w).map(|(&n, w)| n as f64 * w).sum();
            prop_assert!((s - total as f64).abs() < 1e-9);
        }
    }
}
