//! Forward and backward passes of the full network.

use rayon::prelude::*;

use super::attention::{attend_backward, attend_forward, AttentionCache, AttentionMode};
use super::params::{FusionParams, Linear};
use super::{FusionConfig, FusionError};
use crate::dataset::EmbeddingRecord;
use crate::math::{argmax, sigmoid, softmax, softmax_rows, Matrix, Rng, SoftmaxAxis};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Probabilities are floored here before taking the log in the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Pooled `4 · d_t` representation; doubles as the retrieval key.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector(Vec<f64>);

impl FusedVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for FusedVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self, FusionError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(FusionError::DimensionMismatch(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= Self::TOLERANCE);
        Self(probs)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Configuration plus weights: everything needed to run the network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: FusionParams,
}

impl FusionModel {
    /// Freshly initialized model.
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self, FusionError> {
        config.validate()?;
        let params = FusionParams::init(&config, &mut Rng::new(seed));
        Ok(Self { config, params })
    }

    /// Eval-mode forward pass.
    pub fn infer(&self, rec: &EmbeddingRecord) -> Result<(FusedVector, ProbVector), FusionError> {
        let cache = forward_cached(rec, &self.params, &self.config, None)?;
        Ok((FusedVector(cache.z), cache.probs))
    }

    pub fn embed(&self, rec: &EmbeddingRecord) -> Result<FusedVector, FusionError> {
        Ok(self.infer(rec)?.0)
    }

    pub fn predict(&self, rec: &EmbeddingRecord) -> Result<(usize, ProbVector), FusionError> {
        let (_, probs) = self.infer(rec)?;
        Ok((probs.argmax(), probs))
    }

    /// Eval-mode inference over many records, in parallel, order preserved.
    pub fn infer_all(&self, records: &[EmbeddingRecord]) -> Result<Vec<(FusedVector, ProbVector)>, FusionError> {
        records.par_iter().map(|r| self.infer(r)).collect()
    }
}

/// `v₁ = v₀ · W_v + b_v`, replicated across all `S` positions.
pub fn project_vision(v0: &[f64], params: &FusionParams, config: &FusionConfig) -> Result<Matrix, FusionError> {
    if v0.len() != config.d_v || params.vision.weight.shape() != (config.d_v, config.d_t) {
        return Err(FusionError::DimensionMismatch(format!(
            "image embedding of length {} for d_v={}",
            v0.len(),
            config.d_v
        )));
    }
    let v1 = params.vision.apply_vec(v0);
    let mut out = Matrix::zeros(config.seq_len, config.d_t);
    for s in 0..config.seq_len {
        out.row_mut(s).copy_from_slice(&v1);
    }
    Ok(out)
}

fn concat_columns(parts: [&Matrix; 4]) -> Result<Matrix, FusionError> {
    let shape = parts[0].shape();
    if parts.iter().any(|p| p.shape() != shape) {
        let shapes: Vec<_> = parts.iter().map(|p| p.shape()).collect();
        return Err(FusionError::DimensionMismatch(format!("pool inputs have shapes {shapes:?}")));
    }
    let mut f = Matrix::zeros(shape.0, 4 * shape.1);
    for (i, p) in parts.iter().enumerate() {
        f.set_block_cols(i * shape.1, p);
    }
    Ok(f)
}

/// Per channel `j`, `z_j = Σ_s α_sj F_sj` with `α_·j = softmax_s(F_·j)`.
fn pool_columns(f: &Matrix) -> (Matrix, Vec<f64>) {
    let alpha = softmax_rows(f, SoftmaxAxis::Column);
    let mut z = vec![0.0; f.cols()];
    for s in 0..f.rows() {
        for ((zj, a), x) in z.iter_mut().zip(alpha.row(s)).zip(f.row(s)) {
            *zj += a * x;
        }
    }
    (alpha, z)
}

/// Concatenates `[A₁ ‖ A₂ ‖ V ‖ T]` and soft-pools over the sequence axis.
pub fn fuse_pool(a1: &Matrix, a2: &Matrix, vision: &Matrix, text: &Matrix) -> Result<FusedVector, FusionError> {
    let f = concat_columns([a1, a2, vision, text])?;
    Ok(FusedVector(pool_columns(&f).1))
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn probs_from_logits(logits: &[f64], num_classes: usize) -> ProbVector {
    if num_classes == 2 {
        let p = sigmoid(logits[0]);
        ProbVector::new_unchecked(vec![1.0 - p, p])
    } else {
        ProbVector::new_unchecked(softmax(logits))
    }
}

struct HeadCache {
    pre: Vec<f64>,
    /// After activation and dropout.
    post: Vec<f64>,
    dropout_scale: Option<Vec<f64>>,
    logits: Vec<f64>,
    probs: ProbVector,
}

fn classify_cached(z: &[f64], params: &FusionParams, config: &FusionConfig, dropout: Option<&mut Rng>) -> HeadCache {
    let pre = params.hidden.apply_vec(z);
    let mut post: Vec<f64> = pre.iter().map(|&x| leaky(x)).collect();
    let dropout_scale = match dropout {
        Some(rng) if config.dropout > 0.0 => {
            let keep = 1.0 / (1.0 - config.dropout);
            let scale: Vec<f64> =
                (0..post.len()).map(|_| if rng.uniform() < config.dropout { 0.0 } else { keep }).collect();
            post.iter_mut().zip(&scale).for_each(|(x, s)| *x *= s);
            Some(scale)
        }
        _ => None,
    };
    let logits = params.head.apply_vec(&post);
    let probs = probs_from_logits(&logits, config.num_classes);
    HeadCache { pre, post, dropout_scale, logits, probs }
}

/// Two-layer LeakyReLU MLP. Dropout is applied only when `dropout` carries a
/// generator. Binary models emit one logit and `[1 − σ(O), σ(O)]`;
/// four-class models emit `softmax(O)`.
pub fn classify(
    z: &FusedVector,
    params: &FusionParams,
    config: &FusionConfig,
    dropout: Option<&mut Rng>,
) -> Result<(Vec<f64>, ProbVector), FusionError> {
    if z.len() != config.fused_dim() || params.hidden.weight.rows() != z.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "fused vector of length {} for d_t={}",
            z.len(),
            config.d_t
        )));
    }
    let head = classify_cached(z.as_slice(), params, config, dropout);
    Ok((head.logits, head.probs))
}

struct ForwardCache {
    v0: Vec<f64>,
    vision: Matrix,
    text: Matrix,
    i2t: AttentionCache,
    i2i: AttentionCache,
    fused: Matrix,
    alpha: Matrix,
    z: Vec<f64>,
    head: HeadCache,
    probs: ProbVector,
}

fn check_record(rec: &EmbeddingRecord, config: &FusionConfig) -> Result<(), FusionError> {
    rec.validate(&config.embedding_dims()).map_err(FusionError::DimensionMismatch)
}

fn forward_cached(
    rec: &EmbeddingRecord,
    params: &FusionParams,
    config: &FusionConfig,
    dropout: Option<&mut Rng>,
) -> Result<ForwardCache, FusionError> {
    check_record(rec, config)?;
    let v0 = rec.image_vector();
    let text = rec.token_matrix(&config.embedding_dims());
    let vision = project_vision(&v0, params, config)?;
    let mask = &rec.attention_mask;
    let (a1, i2t) =
        attend_forward(&vision, &text, mask, &params.image_to_text, AttentionMode::ImageToText, config.heads)?;
    let (a2, i2i) =
        attend_forward(&vision, &text, mask, &params.image_to_image, AttentionMode::ImageToImage, config.heads)?;
    let fused = concat_columns([&a1, &a2, &vision, &text])?;
    let (alpha, z) = pool_columns(&fused);
    let head = classify_cached(&z, params, config, dropout);
    let probs = head.probs.clone();
    Ok(ForwardCache { v0, vision, text, i2t, i2i, fused, alpha, z, head, probs })
}

/// Full forward pass. In eval mode the generator is not touched and the
/// result is a pure function of the inputs.
pub fn forward(
    rec: &EmbeddingRecord,
    params: &FusionParams,
    config: &FusionConfig,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(FusedVector, ProbVector), FusionError> {
    let cache = forward_cached(rec, params, config, train_mode.then_some(rng))?;
    Ok((FusedVector(cache.z), cache.probs))
}

fn add_outer(m: &mut Matrix, a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (x, &bj) in m.row_mut(i).iter_mut().zip(b) {
            *x += ai * bj;
        }
    }
}

fn add_to(bias: &mut Matrix, g: &[f64]) {
    bias.as_mut_slice().iter_mut().zip(g).for_each(|(b, g)| *b += g);
}

/// `W · g` for a `fan_in × fan_out` weight, i.e. the input gradient of `x·W`.
fn backprop_input(layer: &Linear, g: &[f64]) -> Vec<f64> {
    (0..layer.weight.rows()).map(|i| crate::math::dot(layer.weight.row(i), g)).collect()
}

fn backward(cache: &ForwardCache, params: &FusionParams, config: &FusionConfig, d_logits: &[f64]) -> FusionParams {
    let mut g = FusionParams::zeros(config);
    let h = &cache.head;

    add_outer(&mut g.head.weight, &h.post, d_logits);
    add_to(&mut g.head.bias, d_logits);
    let mut d_hidden = backprop_input(&params.head, d_logits);
    if let Some(scale) = &h.dropout_scale {
        d_hidden.iter_mut().zip(scale).for_each(|(d, s)| *d *= s);
    }
    for (d, &x) in d_hidden.iter_mut().zip(&h.pre) {
        if x <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    add_outer(&mut g.hidden.weight, &cache.z, &d_hidden);
    add_to(&mut g.hidden.bias, &d_hidden);
    let dz = backprop_input(&params.hidden, &d_hidden);

    // ∂z_j/∂F_sj = α_sj (1 + F_sj − z_j)
    let (seq, width) = cache.fused.shape();
    let mut d_fused = Matrix::zeros(seq, width);
    for s in 0..seq {
        let (f, a) = (cache.fused.row(s), cache.alpha.row(s));
        for (j, d) in d_fused.row_mut(s).iter_mut().enumerate() {
            *d = dz[j] * a[j] * (1.0 + f[j] - cache.z[j]);
        }
    }
    let d = config.d_t;
    let d_a1 = d_fused.block_cols(0, d);
    let d_a2 = d_fused.block_cols(d, d);
    let mut d_vision = d_fused.block_cols(2 * d, d);

    d_vision.add_assign(&attend_backward(
        &cache.i2t,
        &cache.vision,
        &cache.text,
        &params.image_to_text,
        AttentionMode::ImageToText,
        config.heads,
        &d_a1,
        &mut g.image_to_text,
    ));
    d_vision.add_assign(&attend_backward(
        &cache.i2i,
        &cache.vision,
        &cache.text,
        &params.image_to_image,
        AttentionMode::ImageToImage,
        config.heads,
        &d_a2,
        &mut g.image_to_image,
    ));

    let dv1 = d_vision.col_sums();
    add_outer(&mut g.vision.weight, &cache.v0, &dv1);
    add_to(&mut g.vision.bias, &dv1);
    g
}

fn check_label(label: usize, num_classes: usize) -> Result<(), FusionError> {
    if label >= num_classes {
        return Err(FusionError::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean over the batch of `−w_y · log(max(ŷ[y], 1e-12))`.
pub fn loss(probs: &[ProbVector], labels: &[usize], weights: &[f64]) -> Result<f64, FusionError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(FusionError::DimensionMismatch(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        check_label(y, p.len())?;
        if weights.len() != p.len() {
            return Err(FusionError::DimensionMismatch(format!("{} weights for {} classes", weights.len(), p.len())));
        }
        total -= weights[y] * p.as_slice()[y].max(LOG_CLAMP).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Per-sample loss contribution (already divided by the batch size) and its
/// logit gradient.
fn sample_loss(head: &HeadCache, label: usize, coeff: f64, num_classes: usize) -> (f64, Vec<f64>) {
    let p = head.probs.as_slice();
    let loss = -coeff * p[label].max(LOG_CLAMP).ln();
    let clamped = p[label] <= LOG_CLAMP;
    let d_logits = if clamped {
        vec![0.0; head.logits.len()]
    } else if num_classes == 2 {
        vec![coeff * (p[1] - label as f64)]
    } else {
        p.iter().enumerate().map(|(c, &pc)| coeff * (pc - if c == label { 1.0 } else { 0.0 })).collect()
    };
    (loss, d_logits)
}

/// Weighted cross-entropy over a batch and its gradient w.r.t. every
/// parameter. Samples run in parallel; each gets its own dropout stream
/// forked in order from `dropout`, and gradients are summed in batch order,
/// so results do not depend on thread scheduling.
pub fn loss_and_grad(
    model: &FusionModel,
    records: &[&EmbeddingRecord],
    labels: &[usize],
    weights: &[f64],
    dropout: Option<&mut Rng>,
) -> Result<(f64, FusionParams), FusionError> {
    let config = &model.config;
    if records.len() != labels.len() || records.is_empty() {
        return Err(FusionError::DimensionMismatch(format!("{} records for {} labels", records.len(), labels.len())));
    }
    if weights.len() != config.num_classes {
        return Err(FusionError::DimensionMismatch(format!(
            "{} weights for {} classes",
            weights.len(),
            config.num_classes
        )));
    }
    for &y in labels {
        check_label(y, config.num_classes)?;
    }
    let rngs: Vec<Option<Rng>> = match dropout {
        Some(rng) => records.iter().map(|_| Some(rng.fork())).collect(),
        None => vec![None; records.len()],
    };
    let batch = records.len() as f64;
    let per_sample: Vec<(f64, FusionParams)> = records
        .par_iter()
        .zip(labels)
        .zip(rngs)
        .map(|((rec, &y), mut rng)| {
            let cache = forward_cached(rec, &model.params, config, rng.as_mut())?;
            let (l, d_logits) = sample_loss(&cache.head, y, weights[y] / batch, config.num_classes);
            Ok((l, backward(&cache, &model.params, config, &d_logits)))
        })
        .collect::<Result<_, FusionError>>()?;

    let mut iter = per_sample.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}
