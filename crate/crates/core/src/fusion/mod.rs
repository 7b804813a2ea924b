//! Dual co-attention fusion network over precomputed image and caption
//! embeddings.
//!
//! The forward pipeline is
//! `project_vision → coattend (image→text, image→image) → fuse_pool → classify`.
//! Every stage has a hand-written backward pass; the finite-difference checks
//! in the test suite cover all parameter groups.

mod attention;
mod network;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDims;
use crate::math::MathError;

pub use attention::{coattend, AttentionMode, AttentionOutput};
pub use network::{
    classify, forward, fuse_pool, loss, loss_and_grad, project_vision, FusedVector, FusionModel, ProbVector,
    LEAKY_SLOPE, LOG_CLAMP,
};
pub use params::{
    decode_model, encode_model, load_model, save_model, AttentionParams, FusionParams, Linear, XDMW_MAGIC,
};
pub use train::{accuracy, train, EpochLog, OptimizerKind, TrainSpec, TrainingLog};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("attention mask admits no key position")]
    AllMasked,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("record {0:?} is unlabeled")]
    Unlabeled(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub hidden_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_v: 512, d_t: 1024, seq_len: 64, heads: 8, num_classes: 2, dropout: 0.1, hidden_dim: 512 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        if self.d_v == 0 || self.d_t == 0 || self.seq_len == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.d_t.is_multiple_of(self.heads) {
            return bad(format!("d_t={} not divisible by heads={}", self.d_t, self.heads));
        }
        if !matches!(self.num_classes, 2 | 4) {
            return bad(format!("num_classes must be 2 or 4, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Width of the pooled representation, `4 · d_t`.
    pub fn fused_dim(&self) -> usize {
        4 * self.d_t
    }

    /// One logit for the binary head, `C` otherwise.
    pub fn logit_dim(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_t / self.heads
    }

    pub fn embedding_dims(&self) -> EmbeddingDims {
        EmbeddingDims { d_v: self.d_v, seq_len: self.seq_len, d_t: self.d_t }
    }

    pub fn check_dims(&self, dims: &EmbeddingDims) -> Result<(), FusionError> {
        if *dims != self.embedding_dims() {
            return Err(FusionError::DimensionMismatch(format!(
                "embedding dims {dims:?} do not match model dims {:?}",
                self.embedding_dims()
            )));
        }
        Ok(())
    }
}
