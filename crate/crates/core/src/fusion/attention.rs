//! Multihead cross-attention with image queries and text keys.

use super::params::{AttentionParams, Linear};
use super::FusionError;
use crate::math::{dot, softmax_in_place, Matrix};

/// Where the attended values come from. Queries are always the projected
/// image sequence and keys always the text tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Values are the text tokens.
    ImageToText,
    /// Values are the image sequence itself.
    ImageToImage,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `S × d_t`.
    pub output: Matrix,
    /// Per head, `S × S` attention weights (rows are queries).
    pub weights: Vec<Matrix>,
}

pub(crate) struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
    concat: Matrix,
    reference: usize,
}

fn value_source<'a>(mode: AttentionMode, vision: &'a Matrix, text: &'a Matrix) -> &'a Matrix {
    match mode {
        AttentionMode::ImageToText => text,
        AttentionMode::ImageToImage => vision,
    }
}

/// Multihead attention with `Q = vision`, `K = text` and values chosen by
/// `mode`. Keys whose mask flag is false get zero weight.
pub fn coattend(
    vision: &Matrix,
    text: &Matrix,
    mask: &[bool],
    params: &AttentionParams,
    mode: AttentionMode,
    heads: usize,
) -> Result<AttentionOutput, FusionError> {
    let (output, cache) = attend_forward(vision, text, mask, params, mode, heads)?;
    Ok(AttentionOutput { output, weights: cache.weights })
}

pub(crate) fn attend_forward(
    vision: &Matrix,
    text: &Matrix,
    mask: &[bool],
    params: &AttentionParams,
    mode: AttentionMode,
    heads: usize,
) -> Result<(Matrix, AttentionCache), FusionError> {
    let (seq, d) = vision.shape();
    if text.shape() != (seq, d) || mask.len() != seq {
        return Err(FusionError::DimensionMismatch(format!(
            "vision {:?}, text {:?}, mask {}",
            vision.shape(),
            text.shape(),
            mask.len()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(FusionError::InvalidConfig(format!("d_t={d} not divisible by heads={heads}")));
    }
    if params.query.weight.shape() != (d, d) {
        return Err(FusionError::DimensionMismatch(format!(
            "projection {:?} for width {d}",
            params.query.weight.shape()
        )));
    }
    let Some(reference) = mask.iter().position(|&m| m) else {
        return Err(FusionError::AllMasked);
    };

    let q = params.query.apply(vision);
    // The key bias adds the same `q·b_K` to every logit of a query row and
    // cancels in the softmax, so it is left out of the scores.
    let k = text.matmul(&params.key.weight);
    let v = params.value.apply(value_source(mode, vision, text));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut concat = Matrix::zeros(seq, d);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w = Matrix::zeros(seq, seq);
        for i in 0..seq {
            let qi = &q.row(i)[cols.clone()];
            let row = w.row_mut(i);
            for j in 0..seq {
                row[j] = if mask[j] { dot(qi, &k.row(j)[cols.clone()]) * scale } else { f64::NEG_INFINITY };
            }
            softmax_in_place(row);
        }
        // Σ_j p_j v_j written as v_r + Σ_j p_j (v_j − v_r) around an open
        // key r, so value rows that are identical stay exactly unmixed.
        let base = &v.row(reference)[cols.clone()];
        for i in 0..seq {
            let out = &mut concat.row_mut(i)[cols.clone()];
            out.copy_from_slice(base);
            for j in 0..seq {
                let p = w[(i, j)];
                if p == 0.0 || j == reference {
                    continue;
                }
                for ((o, x), b) in out.iter_mut().zip(&v.row(j)[cols.clone()]).zip(base) {
                    *o += p * (x - b);
                }
            }
        }
        weights.push(w);
    }
    let output = params.output.apply(&concat);
    Ok((output, AttentionCache { q, k, v, weights, concat, reference }))
}

fn accumulate_linear(grad: &mut Linear, input: &Matrix, d_out: &Matrix) {
    grad.weight.add_assign(&input.t_matmul(d_out));
    for (b, g) in grad.bias.as_mut_slice().iter_mut().zip(d_out.col_sums()) {
        *b += g;
    }
}

/// Backpropagates `d_out` through one block. Parameter gradients accumulate
/// into `grads`; returns the gradient w.r.t. the image sequence (through
/// both the query and, for image→image, the value path).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward(
    cache: &AttentionCache,
    vision: &Matrix,
    text: &Matrix,
    params: &AttentionParams,
    mode: AttentionMode,
    heads: usize,
    d_out: &Matrix,
    grads: &mut AttentionParams,
) -> Matrix {
    let (seq, d) = vision.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    accumulate_linear(&mut grads.output, &cache.concat, d_out);
    let d_concat = d_out.matmul_t(&params.output.weight);

    let mut d_q = Matrix::zeros(seq, d);
    let mut d_k = Matrix::zeros(seq, d);
    let mut d_v = Matrix::zeros(seq, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let w = &cache.weights[h];
        for i in 0..seq {
            let d_oi = &d_concat.row(i)[cols.clone()];
            // d weights, then softmax backward: ds = p ⊙ (dp − Σ p·dp).
            let base = &cache.v.row(cache.reference)[cols.clone()];
            let dp: Vec<f64> = (0..seq)
                .map(|j| cache.v.row(j)[cols.clone()].iter().zip(base).zip(d_oi).map(|((x, b), g)| (x - b) * g).sum())
                .collect();
            let inner: f64 = (0..seq).map(|j| w[(i, j)] * dp[j]).sum();
            for j in 0..seq {
                let p = w[(i, j)];
                if p == 0.0 {
                    continue;
                }
                for (dv, g) in d_v.row_mut(j)[cols.clone()].iter_mut().zip(d_oi) {
                    *dv += p * g;
                }
                let ds = p * (dp[j] - inner) * scale;
                for c in cols.clone() {
                    d_q[(i, c)] += ds * cache.k[(j, c)];
                    d_k[(j, c)] += ds * cache.q[(i, c)];
                }
            }
        }
    }

    accumulate_linear(&mut grads.query, vision, &d_q);
    grads.key.weight.add_assign(&text.t_matmul(&d_k));
    accumulate_linear(&mut grads.value, value_source(mode, vision, text), &d_v);

    let mut d_vision = d_q.matmul_t(&params.query.weight);
    if mode == AttentionMode::ImageToImage {
        d_vision.add_assign(&d_v.matmul_t(&params.value.weight));
    }
    d_vision
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{softmax, Rng};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Single-head attention written out longhand.
    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[bool]) -> Matrix {
        let (s, d) = q.shape();
        let mut out = Matrix::zeros(s, d);
        for i in 0..s {
            let mut logits = vec![f64::NEG_INFINITY; s];
            for j in 0..s {
                if mask[j] {
                    logits[j] = (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / (d as f64).sqrt();
                }
            }
            let p = softmax(&logits);
            for c in 0..d {
                out[(i, c)] = (0..s).map(|j| p[j] * v[(j, c)]).sum();
            }
        }
        out
    }

    #[test]
    fn matches_naive_single_head() {
        let mut rng = Rng::new(4);
        let vis = random(&mut rng, 2, 2);
        let text = random(&mut rng, 2, 2);
        let id = AttentionParams::identity(2);
        let mask = [true, true];
        let a1 = coattend(&vis, &text, &mask, &id, AttentionMode::ImageToText, 1).unwrap();
        let oracle = naive_attention(&vis, &text, &text, &mask);
        for (x, y) in a1.output.as_slice().iter().zip(oracle.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
        let a2 = coattend(&vis, &text, &mask, &id, AttentionMode::ImageToImage, 1).unwrap();
        let oracle = naive_attention(&vis, &text, &vis, &mask);
        for (x, y) in a2.output.as_slice().iter().zip(oracle.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn single_open_key_copies_its_value() {
        let mut rng = Rng::new(5);
        let vis = random(&mut rng, 4, 4);
        let text = random(&mut rng, 4, 4);
        let mask = [false, false, true, false];
        let out = coattend(&vis, &text, &mask, &AttentionParams::identity(4), AttentionMode::ImageToText, 2).unwrap();
        for i in 0..4 {
            assert_eq!(out.output.row(i), text.row(2));
        }
    }

    #[test]
    fn constant_keys_give_constant_output() {
        let mut rng = Rng::new(6);
        let vis = random(&mut rng, 3, 4);
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let text = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]);
        let out =
            coattend(&vis, &text, &[true; 3], &AttentionParams::identity(4), AttentionMode::ImageToText, 2).unwrap();
        for i in 0..3 {
            for (x, y) in out.output.row(i).iter().zip(&row) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_distributions_and_respect_mask() {
        let mut rng = Rng::new(7);
        let params = AttentionParams::init(8, &mut rng);
        let vis = random(&mut rng, 5, 8);
        let text = random(&mut rng, 5, 8);
        let mask = [true, false, true, true, false];
        let out = coattend(&vis, &text, &mask, &params, AttentionMode::ImageToImage, 2).unwrap();
        for w in &out.weights {
            for i in 0..5 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w[(i, 1)] < 1e-12 && w[(i, 4)] < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let m = Matrix::zeros(2, 4);
        let p = AttentionParams::identity(4);
        assert!(matches!(
            coattend(&m, &m, &[false, false], &p, AttentionMode::ImageToText, 2),
            Err(FusionError::AllMasked)
        ));
        assert!(matches!(
            coattend(&m, &Matrix::zeros(3, 4), &[true, true], &p, AttentionMode::ImageToText, 2),
            Err(FusionError::DimensionMismatch(_))
        ));
    }
}
