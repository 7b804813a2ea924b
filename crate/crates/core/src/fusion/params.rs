//! Learnable tensors and the `XDMW` model file.
//!
//! `XDMW` layout (little-endian): magic `XDMW`, version `u32 = 1`,
//! `config_json_len u32` + UTF-8 JSON of [`FusionConfig`], then every tensor
//! as `f32` in [`FusionParams::tensors`] order:
//! `W_v, b_v`, image→text block `Q, b_Q, K, b_K, V, b_V, O, b_O`, the
//! image→image block in the same order, then `W_1, b_1, W_2, b_2`.
//! Weights are stored `fan_in × fan_out`, row-major.

use std::path::Path;

use super::{FusionConfig, FusionError, FusionModel};
use crate::binio::{write_atomic, ByteReader, ByteWriter, FormatError, FORMAT_VERSION};
use crate::math::{Matrix, Rng};

pub const XDMW_MAGIC: &[u8; 4] = b"XDMW";

/// Affine map `x · W + b` with `W: fan_in × fan_out` and `b: 1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Matrix::zeros(fan_in, fan_out), bias: Matrix::zeros(1, fan_out) }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self { weight: Matrix::from_vec(fan_in, fan_out, data).unwrap(), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn identity(n: usize) -> Self {
        Self { weight: Matrix::identity(n), bias: Matrix::zeros(1, n) }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        out.add_row_broadcast(self.bias.as_slice());
        out
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.as_slice().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

/// Query/key/value/output projections of one multihead attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn init(d: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            query: Linear::identity(d),
            key: Linear::identity(d),
            value: Linear::identity(d),
            output: Linear::identity(d),
        }
    }

    fn linears(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }
}

/// All learnable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub vision: Linear,
    pub image_to_text: AttentionParams,
    pub image_to_image: AttentionParams,
    pub hidden: Linear,
    pub head: Linear,
}

impl FusionParams {
    pub fn zeros(config: &FusionConfig) -> Self {
        Self {
            vision: Linear::zeros(config.d_v, config.d_t),
            image_to_text: AttentionParams::zeros(config.d_t),
            image_to_image: AttentionParams::zeros(config.d_t),
            hidden: Linear::zeros(config.fused_dim(), config.hidden_dim),
            head: Linear::zeros(config.hidden_dim, config.logit_dim()),
        }
    }

    pub fn init(config: &FusionConfig, rng: &mut Rng) -> Self {
        Self {
            vision: Linear::init(config.d_v, config.d_t, rng),
            image_to_text: AttentionParams::init(config.d_t, rng),
            image_to_image: AttentionParams::init(config.d_t, rng),
            hidden: Linear::init(config.fused_dim(), config.hidden_dim, rng),
            head: Linear::init(config.hidden_dim, config.logit_dim(), rng),
        }
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.vision];
        out.extend(self.image_to_text.linears());
        out.extend(self.image_to_image.linears());
        out.push(&self.hidden);
        out.push(&self.head);
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.vision];
        out.extend(self.image_to_text.linears_mut());
        out.extend(self.image_to_image.linears_mut());
        out.push(&mut self.hidden);
        out.push(&mut self.head);
        out
    }

    /// Tensors in serialization order, each weight followed by its bias.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.linears().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.linears_mut().into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["vision.weight".to_string(), "vision.bias".to_string()];
        for block in ["i2t", "i2i"] {
            for proj in ["query", "key", "value", "output"] {
                names.push(format!("{block}.{proj}.weight"));
                names.push(format!("{block}.{proj}.bias"));
            }
        }
        for layer in ["mlp.hidden", "mlp.head"] {
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    /// Rebuilds parameters from tensors in [`tensors`](Self::tensors) order.
    pub fn from_tensors(config: &FusionConfig, tensors: &[Matrix]) -> Result<Self, FusionError> {
        let mut out = Self::zeros(config);
        let n = out.tensors().len();
        if tensors.len() != n {
            return Err(FusionError::DimensionMismatch(format!("expected {n} tensors, got {}", tensors.len())));
        }
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(FusionError::DimensionMismatch(format!(
                    "tensor shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Vec<Matrix> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn add_assign(&mut self, other: &FusionParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub fn encode_model(model: &FusionModel) -> Result<Vec<u8>, FormatError> {
    let json = serde_json::to_string(&model.config).map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    let mut w = ByteWriter::new();
    w.bytes(XDMW_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(json.len() as u32);
    w.bytes(json.as_bytes());
    for t in model.params.tensors() {
        t.as_slice().iter().for_each(|&x| w.f64_as_f32(x));
    }
    Ok(w.into_inner())
}

pub fn decode_model(bytes: &[u8]) -> Result<FusionModel, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(XDMW_MAGIC)?;
    r.version()?;
    let len = r.u32()? as usize;
    let json = r.utf8(len)?;
    let config: FusionConfig =
        serde_json::from_str(&json).map_err(|e| FormatError::InvalidContent(format!("model config: {e}")))?;
    config.validate().map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    let mut params = FusionParams::zeros(&config);
    for t in params.tensors_mut() {
        let values = r.f32s(t.len())?;
        for (dst, v) in t.as_mut_slice().iter_mut().zip(values) {
            *dst = v as f64;
        }
    }
    r.finish()?;
    Ok(FusionModel { config, params })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FusionModel, FormatError> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_model(path: impl AsRef<Path>, model: &FusionModel) -> Result<(), FormatError> {
    write_atomic(path.as_ref(), &encode_model(model)?)?;
    Ok(())
}
