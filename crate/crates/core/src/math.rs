//! Dense row-major matrices, stable reductions and the seeded generator used
//! across the engine.
//!
//! Everything numeric runs in `f64`. Files store `f32`; widening on load is
//! exact, so round-trips through the binary formats never drift.

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MathError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        if data.len() != rows * cols {
            return Err(MathError::DimensionMismatch {
                expected: format!("{} elements ({rows}x{cols})", rows * cols),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    /// A 1×n matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`. Panics if the inner dimensions disagree.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length");
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Copies `src` into columns `[col_offset, col_offset + src.cols)`.
    pub fn set_block_cols(&mut self, col_offset: usize, src: &Matrix) {
        assert_eq!(self.rows, src.rows, "block row count");
        assert!(col_offset + src.cols <= self.cols, "block exceeds width");
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + col_offset..r * self.cols + col_offset + src.cols];
            dst.copy_from_slice(src.row(r));
        }
    }

    /// Extracts columns `[col_offset, col_offset + width)`.
    pub fn block_cols(&self, col_offset: usize, width: usize) -> Matrix {
        assert!(col_offset + width <= self.cols, "block exceeds width");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.data[r * self.cols + col_offset..r * self.cols + col_offset + width]);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which slices of a matrix a softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each row sums to one.
    Row,
    /// Each column sums to one.
    Column,
}

/// In-place max-subtracted softmax over one slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_rows(m: &Matrix, axis: SoftmaxAxis) -> Matrix {
    match axis {
        SoftmaxAxis::Row => {
            let mut out = m.clone();
            for r in 0..out.rows {
                softmax_in_place(out.row_mut(r));
            }
            out
        }
        SoftmaxAxis::Column => softmax_rows(&m.transpose(), SoftmaxAxis::Row).transpose(),
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, MathError> {
    let n = l2_norm(v);
    if !n.is_finite() {
        return Err(MathError::NonFinite("vector norm".into()));
    }
    if n < ZERO_NORM {
        return Err(MathError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Seeded ChaCha8 stream. ChaCha output is specified independently of
/// platform and word size, so a seed replays identically everywhere.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Derives an independent generator; used to give each parallel task its
    /// own stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Per-tensor result of [`grad_check`].
#[derive(Debug, Clone)]
pub struct TensorGradError {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients against central differences.
///
/// For each entry the error is `|a − n| / max(|a|, |n|, 1e-8)` with
/// `n = (f(θ+ε) − f(θ−ε)) / 2ε`.
pub fn grad_check<F>(mut f: F, params: &[Matrix], analytic: &[Matrix], eps: f64) -> Result<GradCheckReport, MathError>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(MathError::DimensionMismatch {
            expected: format!("{} gradient tensors", params.len()),
            actual: format!("{}", analytic.len()),
        });
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (t, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[t].shape() {
            return Err(MathError::DimensionMismatch {
                expected: format!("{:?}", params[t].shape()),
                actual: format!("{:?}", grad.shape()),
            });
        }
        let mut report = TensorGradError { index: t, max_rel_error: 0.0, worst_entry: 0, analytic: 0.0, numeric: 0.0 };
        for i in 0..params[t].len() {
            let orig = work[t].as_slice()[i];
            work[t].as_mut_slice()[i] = orig + eps;
            let plus = f(&work);
            work[t].as_mut_slice()[i] = orig - eps;
            let minus = f(&work);
            work[t].as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(MathError::NonFinite(format!("objective at tensor {t} entry {i}")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice()[i];
            if !a.is_finite() {
                return Err(MathError::NonFinite(format!("analytic gradient at tensor {t} entry {i}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report = TensorGradError { index: t, max_rel_error: rel, worst_entry: i, analytic: a, numeric };
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0], vec![1.0, 2.0]]);
        let s = softmax_rows(&m, SoftmaxAxis::Row);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        // e/(e+e^2) = 1/(1+e)
        assert!((s[(2, 0)] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((s[(2, 1)] - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn softmax_columns() {
        let m = Matrix::from_rows(&[vec![0.0, 5.0], vec![0.0, 5.0]]);
        let s = softmax_rows(&m, SoftmaxAxis::Column);
        assert_eq!(s.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(MathError::ZeroVector));
        let u = l2_normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn grad_check_trivial() {
        let x = vec![Matrix::from_rows(&[vec![3.0]])];
        let g = vec![Matrix::from_rows(&[vec![6.0]])];
        let r = grad_check(|p| p[0][(0, 0)].powi(2), &x, &g, 1e-5).unwrap();
        assert!(r.max_rel_error() < 1e-9, "{}", r.max_rel_error());

        let zero = vec![Matrix::zeros(1, 1)];
        let r = grad_check(|_| 7.0, &x, &zero, 1e-5).unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let x = vec![Matrix::from_rows(&[vec![0.0]])];
        let g = vec![Matrix::zeros(1, 1)];
        let err = grad_check(|p| 1.0 / (p[0][(0, 0)] - 1e-5), &x, &g, 1e-5).unwrap_err();
        assert!(matches!(err, MathError::NonFinite(_)));
    }

    #[test]
    fn rng_replays() {
        let a: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, {
            let mut r = Rng::new(8);
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        });
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        for _ in 0..5 {
            let a = Matrix::from_vec(32, 32, (0..1024).map(|_| rng.normal()).collect()).unwrap();
            let b = Matrix::from_vec(32, 32, (0..1024).map(|_| rng.normal()).collect()).unwrap();
            let oracle = naive_matmul(&a, &b);
            for (x, y) in a.matmul(&b).as_slice().iter().zip(oracle.as_slice()) {
                assert!((x - y).abs() < 1e-10);
            }
            let bt = b.transpose();
            for (x, y) in a.matmul_t(&bt).as_slice().iter().zip(oracle.as_slice()) {
                assert!((x - y).abs() < 1e-10);
            }
            let at = a.transpose();
            for (x, y) in at.t_matmul(&b).as_slice().iter().zip(oracle.as_slice()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-800.0f64..800.0, 1..12), shift in -300.0f64..300.0) {
            let s = softmax(&xs);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            for (a, b) in softmax(&shifted).iter().zip(&s) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_scale_invariant(xs in prop::collection::vec(-10.0f64..10.0, 1..16), lambda in 1e-3f64..1e3) {
            prop_assume!(l2_norm(&xs) > 1e-6);
            let u = l2_normalize(&xs).unwrap();
            prop_assert!((l2_norm(&u) - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|x| x * lambda).collect();
            for (a, b) in l2_normalize(&scaled).unwrap().iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in l2_normalize(&u).unwrap().iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
