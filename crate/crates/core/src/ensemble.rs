//! Convex blend of model and retrieval distributions, and the α search.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::EmbeddingSet;
use crate::eval::{macro_f1, EvalError};
use crate::fusion::{FusedVector, FusionError, FusionModel, ProbVector};
use crate::math::argmax;
use crate::retrieval::{aggregate_labels, FlatIndex, RetrievalError, Weighting};

pub const DEFAULT_GRID: [f64; 5] = [0.50, 0.55, 0.60, 0.65, 0.70];
pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("distributions over {0} and {1} classes")]
    DimensionMismatch(usize, usize),
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error("record {0:?} has no gold label")]
    Unlabeled(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Weight of the model branch, `α ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(alpha: f64) -> Result<Self, EnsembleError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EnsembleError::AlphaOutOfRange(alpha));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `α·y_model + (1 − α)·y_retrieval` and its argmax.
pub fn fuse_predictions(
    y_model: &ProbVector,
    y_retrieval: &ProbVector,
    alpha: FusionWeight,
) -> Result<(ProbVector, usize), EnsembleError> {
    if y_model.len() != y_retrieval.len() {
        return Err(EnsembleError::DimensionMismatch(y_model.len(), y_retrieval.len()));
    }
    let a = alpha.0;
    let fused: Vec<f64> = match a {
        1.0 => y_model.as_slice().to_vec(),
        0.0 => y_retrieval.as_slice().to_vec(),
        _ => y_model.as_slice().iter().zip(y_retrieval.as_slice()).map(|(m, r)| a * m + (1.0 - a) * r).collect(),
    };
    let label = argmax(&fused);
    Ok((ProbVector::new(fused)?, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// `k` neighbors overall.
    Global,
    /// `k` neighbors from every class.
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalSettings {
    pub k: usize,
    pub mode: RetrievalMode,
    #[serde(skip)]
    pub weighting: Weighting,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self { k: DEFAULT_K, mode: RetrievalMode::PerClass, weighting: Weighting::Similarity }
    }
}

/// Soft label from the neighbors of `query`. In per-class mode, classes
/// absent from the index simply contribute no neighbors.
pub fn retrieval_distribution(
    index: &FlatIndex,
    query: &FusedVector,
    settings: &RetrievalSettings,
    num_classes: usize,
) -> Result<ProbVector, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let neighbors = match settings.mode {
        RetrievalMode::Global => index.top_k(query.as_slice(), settings.k)?,
        RetrievalMode::PerClass => index.top_k_per_class(query.as_slice(), settings.k, num_classes)?.neighbors,
    };
    aggregate_labels(&neighbors, num_classes, settings.weighting)
}

/// Index over the model's fused vectors of `train_set`, labeled with gold.
pub fn build_fused_index(model: &FusionModel, train_set: &EmbeddingSet) -> Result<FlatIndex, EnsembleError> {
    model.config.check_dims(&train_set.dims)?;
    let fused = model.infer_all(&train_set.records)?;
    let mut entries = Vec::with_capacity(fused.len());
    for (rec, (z, _)) in train_set.records.iter().zip(fused) {
        let label = rec.label.ok_or_else(|| EnsembleError::Unlabeled(rec.id.clone()))?;
        entries.push((rec.id.clone(), label, z.into_vec()));
    }
    Ok(FlatIndex::build(entries)?)
}

/// Both branch outputs for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub id: String,
    pub y_model: ProbVector,
    pub y_retrieval: ProbVector,
    pub gold: Option<usize>,
}

pub fn branch_outputs(
    model: &FusionModel,
    index: &FlatIndex,
    set: &EmbeddingSet,
    settings: &RetrievalSettings,
) -> Result<Vec<BranchOutputs>, EnsembleError> {
    model.config.check_dims(&set.dims)?;
    let c = model.config.num_classes;
    set.records
        .par_iter()
        .map(|rec| {
            let (z, y_model) = model.infer(rec)?;
            let y_retrieval = retrieval_distribution(index, &z, settings, c)?;
            Ok(BranchOutputs { id: rec.id.clone(), y_model, y_retrieval, gold: rec.label })
        })
        .collect()
}

/// One output line of the fused predictor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusedPrediction {
    pub id: String,
    pub y_model: Vec<f64>,
    pub y_retrieval: Vec<f64>,
    pub y_fused: Vec<f64>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
}

pub fn fuse_all(branches: &[BranchOutputs], alpha: FusionWeight) -> Result<Vec<FusedPrediction>, EnsembleError> {
    branches
        .iter()
        .map(|b| {
            let (fused, label) = fuse_predictions(&b.y_model, &b.y_retrieval, alpha)?;
            Ok(FusedPrediction {
                id: b.id.clone(),
                y_model: b.y_model.as_slice().to_vec(),
                y_retrieval: b.y_retrieval.as_slice().to_vec(),
                y_fused: fused.into_vec(),
                label,
                gold: b.gold,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaScore {
    pub alpha: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchResult {
    pub best_alpha: f64,
    pub best_macro_f1: f64,
    /// Model-only (`α = 1`) score for reference.
    pub model_only_macro_f1: f64,
    pub table: Vec<AlphaScore>,
}

fn score(branches: &[BranchOutputs], gold: &[usize], alpha: FusionWeight, c: usize) -> Result<f64, EnsembleError> {
    let preds = branches
        .iter()
        .map(|b| Ok(fuse_predictions(&b.y_model, &b.y_retrieval, alpha)?.1))
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(macro_f1(&preds, gold, c)?)
}

/// Scores every α on precomputed branch outputs. The best macro-F1 wins;
/// ties go to the smaller α.
pub fn grid_search_on(branches: &[BranchOutputs], grid: &[f64]) -> Result<GridSearchResult, EnsembleError> {
    if grid.is_empty() {
        return Err(EnsembleError::EmptyGrid);
    }
    let alphas = grid.iter().map(|&a| FusionWeight::new(a)).collect::<Result<Vec<_>, _>>()?;
    let gold = branches
        .iter()
        .map(|b| b.gold.ok_or_else(|| EnsembleError::Unlabeled(b.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let c = branches.first().map_or(0, |b| b.y_model.len());
    let table = alphas
        .par_iter()
        .map(|&a| Ok(AlphaScore { alpha: a.0, macro_f1: score(branches, &gold, a, c)? }))
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    let best = table
        .iter()
        .reduce(|best, s| {
            if s.macro_f1 > best.macro_f1 || (s.macro_f1 == best.macro_f1 && s.alpha < best.alpha) {
                s
            } else {
                best
            }
        })
        .expect("non-empty grid");
    Ok(GridSearchResult {
        best_alpha: best.alpha,
        best_macro_f1: best.macro_f1,
        model_only_macro_f1: score(branches, &gold, FusionWeight(1.0), c)?,
        table,
    })
}

/// Runs both branches over `valid_set`, then [`grid_search_on`].
pub fn grid_search_alpha(
    model: &FusionModel,
    index: &FlatIndex,
    valid_set: &EmbeddingSet,
    grid: &[f64],
    settings: &RetrievalSettings,
) -> Result<GridSearchResult, EnsembleError> {
    grid_search_on(&branch_outputs(model, index, valid_set, settings)?, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut Rng, c: usize) -> ProbVector {
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.iter().map(|x| x / s).collect()).unwrap()
    }

    fn branch(id: usize, m: &[f64], r: &[f64], gold: usize) -> BranchOutputs {
        BranchOutputs { id: id.to_string(), y_model: pv(m), y_retrieval: pv(r), gold: Some(gold) }
    }

    #[test]
    fn fuse_examples() {
        let m = pv(&[0.5, 0.5]);
        let r = pv(&[1.0, 0.0]);
        let (f, label) = fuse_predictions(&m, &r, FusionWeight::new(0.6).unwrap()).unwrap();
        assert!((f.as_slice()[0] - 0.7).abs() < 1e-12 && (f.as_slice()[1] - 0.3).abs() < 1e-12);
        assert_eq!(label, 0);
        assert_eq!(fuse_predictions(&m, &r, FusionWeight::new(1.0).unwrap()).unwrap().0, m);
        assert_eq!(fuse_predictions(&m, &r, FusionWeight::new(0.0).unwrap()).unwrap().0, r);
        let same = pv(&[0.2, 0.3, 0.5]);
        for a in [0.1, 0.37, 0.9] {
            let (f, _) = fuse_predictions(&same, &same, FusionWeight::new(a).unwrap()).unwrap();
            for (x, y) in f.as_slice().iter().zip(same.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(matches!(FusionWeight::new(1.2), Err(EnsembleError::AlphaOutOfRange(_))));
        assert!(fuse_predictions(&m, &same, FusionWeight::new(0.5).unwrap()).is_err());
    }

    #[test]
    fn grid_dominance_and_ties() {
        // Retrieval always right, model always wrong.
        let branches: Vec<BranchOutputs> = (0..6)
            .map(|i| {
                let g = i % 2;
                let right = if g == 0 { [0.9, 0.1] } else { [0.1, 0.9] };
                let wrong = [right[1], right[0]];
                branch(i, &wrong, &right, g)
            })
            .collect();
        let r = grid_search_on(&branches, &[1.0, 0.0]).unwrap();
        assert_eq!(r.best_alpha, 0.0);
        assert_eq!(r.best_macro_f1, 1.0);
        assert_eq!(r.model_only_macro_f1, 0.0);

        let same: Vec<BranchOutputs> =
            branches.iter().map(|b| BranchOutputs { y_retrieval: b.y_model.clone(), ..b.clone() }).collect();
        assert_eq!(grid_search_on(&same, &DEFAULT_GRID).unwrap().best_alpha, 0.5);
        assert_eq!(grid_search_on(&same, &[0.7, 0.6]).unwrap().best_alpha, 0.6);
        assert!(matches!(grid_search_on(&same, &[]), Err(EnsembleError::EmptyGrid)));
    }

    #[test]
    fn grid_matches_exhaustive_oracle() {
        let mut rng = Rng::new(31);
        let branches: Vec<BranchOutputs> = (0..60)
            .map(|i| BranchOutputs {
                id: i.to_string(),
                y_model: random_dist(&mut rng, 3),
                y_retrieval: random_dist(&mut rng, 3),
                gold: Some(rng.below(3)),
            })
            .collect();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let result = grid_search_on(&branches, &grid).unwrap();

        let gold: Vec<usize> = branches.iter().map(|b| b.gold.unwrap()).collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &a in &grid {
            let preds: Vec<usize> = branches
                .iter()
                .map(|b| {
                    let fused: Vec<f64> = b
                        .y_model
                        .as_slice()
                        .iter()
                        .zip(b.y_retrieval.as_slice())
                        .map(|(m, r)| a * m + (1.0 - a) * r)
                        .collect();
                    argmax(&fused)
                })
                .collect();
            let f = macro_f1(&preds, &gold, 3).unwrap();
            let row = result.table.iter().find(|s| s.alpha == a).unwrap();
            assert_eq!(row.macro_f1, f);
            if f > best.0 {
                best = (f, a);
            }
        }
        assert_eq!(result.best_alpha, best.1);
        assert_eq!(grid_search_on(&branches, &grid).unwrap(), result);
    }

    #[test]
    fn output_line_shape() {
        let out = fuse_all(&[branch(7, &[0.4, 0.6], &[0.8, 0.2], 0)], FusionWeight::new(0.5).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&out[0]).unwrap();
        assert_eq!(v["id"], "7");
        assert_eq!(v["label"], 0);
        assert_eq!(v["gold"], 0);
        assert_eq!(v["y_fused"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn convex_and_linear(seed in 0u64..10_000, a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0) {
            let mut rng = Rng::new(seed);
            let m = random_dist(&mut rng, 4);
            let r = random_dist(&mut rng, 4);
            let f = |a: f64| fuse_predictions(&m, &r, FusionWeight::new(a).unwrap()).unwrap().0;
            let (f1, f2, mid) = (f(a1), f(a2), f((a1 + a2) / 2.0));
            for c in 0..4 {
                let (lo, hi) = (m.as_slice()[c].min(r.as_slice()[c]), m.as_slice()[c].max(r.as_slice()[c]));
                prop_assert!(f1.as_slice()[c] >= lo - 1e-15 && f1.as_slice()[c] <= hi + 1e-15);
                prop_assert!((f1.as_slice()[c] + f2.as_slice()[c] - 2.0 * mid.as_slice()[c]).abs() < 1e-12);
            }
            prop_assert!((f1.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
