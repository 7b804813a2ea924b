//! Stratified train/valid/test splitting.
//!
//! Split sizes are apportioned across classes in two stages:
//!
//! 1. The validation split takes `⌈f_valid · N⌉` records. Each class gets the
//!    floor of its quota `f_valid · n_c`; leftover seats go to the largest
//!    fractional parts (ties to the lower class index).
//! 2. The test split takes `⌈f_test · N⌉` records, divided in proportion to
//!    what each class has left and rounded down, then clamped so that both
//!    the test and train counts stay within one record of their quotas.
//!
//! Whatever remains goes to train. Sizes depend only on class counts and
//! fractions; the seed only decides which records land where.

use super::{DatasetError, EmbeddingSet};
use crate::math::Rng;

pub const MIN_CLASS_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// `(train, valid, test)`, each positive, summing to 1.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.8, 0.1, 0.1], seed: 42 }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidFractions(self.fractions));
        }
        Ok(())
    }
}

/// Per-class sizes of each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// `⌈f · n⌉`, tolerant of representation error in `f`.
fn ceil_fraction(f: f64, n: usize) -> usize {
    (f * n as f64 - 1e-9).ceil().max(0.0) as usize
}

fn floor_fraction(f: f64, n: usize) -> usize {
    (f * n as f64 + 1e-9).floor().max(0.0) as usize
}

/// Largest-remainder apportionment of `total` seats over real quotas.
fn apportion_largest_remainder(total: usize, quotas: &[f64]) -> Vec<usize> {
    let mut seats: Vec<usize> = quotas.iter().map(|&q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let frac = |i: usize| quotas[i] - seats[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let short = total.saturating_sub(seats.iter().sum::<usize>());
    for &c in order.iter().cycle().take(short) {
        seats[c] += 1;
    }
    seats
}

/// Split sizes per class for the given class counts.
pub fn split_counts(class_counts: &[usize], fractions: [f64; 3]) -> Result<Vec<SplitCounts>, DatasetError> {
    SplitSpec { fractions, seed: 0 }.validate()?;
    for (class, &count) in class_counts.iter().enumerate() {
        if count > 0 && count < MIN_CLASS_SIZE {
            return Err(DatasetError::ClassTooSmall { class, count, min: MIN_CLASS_SIZE });
        }
    }
    let [f_train, f_valid, f_test] = fractions;
    let n: usize = class_counts.iter().sum();
    let quotas: Vec<f64> = class_counts.iter().map(|&c| f_valid * c as f64).collect();
    let valid = apportion_largest_remainder(ceil_fraction(f_valid, n), &quotas);
    let left: Vec<usize> = class_counts.iter().zip(&valid).map(|(c, v)| c - v).collect();
    let left_total: u128 = left.iter().map(|&x| x as u128).sum();
    let test_total = ceil_fraction(f_test, n) as u128;
    Ok(class_counts
        .iter()
        .zip(valid)
        .zip(&left)
        .map(|((&count, valid), &left)| {
            let mut test = (test_total * left as u128).checked_div(left_total).unwrap_or(0) as usize;
            let lo = floor_fraction(f_test, count).max(left.saturating_sub(ceil_fraction(f_train, count)));
            let hi = ceil_fraction(f_test, count).min(left.saturating_sub(floor_fraction(f_train, count)));
            if lo <= hi {
                test = test.clamp(lo, hi);
            }
            SplitCounts { train: count - valid - test, valid, test }
        })
        .collect())
}

/// Stratified split of labelled items; returns indices into `labels`, each
/// split in ascending order.
pub fn stratified_split(labels: &[Option<usize>], spec: &SplitSpec) -> Result<SplitIndices, DatasetError> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let l = label.ok_or_else(|| DatasetError::Unlabeled(format!("#{i}")))?;
        if by_class.len() <= l {
            by_class.resize_with(l + 1, Vec::new);
        }
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let sizes = split_counts(&counts, spec.fractions)?;

    let mut rng = Rng::new(spec.seed);
    let mut out = SplitIndices::default();
    for (members, size) in by_class.iter_mut().zip(&sizes) {
        rng.shuffle(members);
        out.valid.extend_from_slice(&members[..size.valid]);
        out.test.extend_from_slice(&members[size.valid..size.valid + size.test]);
        out.train.extend_from_slice(&members[size.valid + size.test..]);
    }
    out.train.sort_unstable();
    out.valid.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Splits an embedding set; records keep their original relative order.
pub fn stratified_split_records(
    set: &EmbeddingSet,
    spec: &SplitSpec,
) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet), DatasetError> {
    if let Some(r) = set.records.iter().find(|r| r.label.is_none()) {
        return Err(DatasetError::Unlabeled(r.id.clone()));
    }
    let labels: Vec<Option<usize>> = set.records.iter().map(|r| r.label).collect();
    let idx = stratified_split(&labels, spec)?;
    Ok((set.subset(&idx.train), set.subset(&idx.valid), set.subset(&idx.test)))
}
