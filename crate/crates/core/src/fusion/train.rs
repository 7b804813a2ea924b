//! Minibatch training with early stopping on validation accuracy.

use serde::{Deserialize, Serialize};

use super::network::{loss_and_grad, FusionModel};
use super::params::FusionParams;
use super::{FusionConfig, FusionError};
use crate::dataset::{class_weights, EmbeddingRecord, EmbeddingSet};
use crate::math::{Matrix, Rng};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain SGD; weight decay is added to the gradient.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adamw or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without a strict validation-accuracy improvement
    /// before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss; unit weights when false.
    pub weighted_loss: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            max_epochs: 20,
            patience: 3,
            optimizer: OptimizerKind::AdamW,
            seed: 42,
            weighted_loss: true,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.max_epochs > 0
            && self.patience > 0
            && self.patience <= self.max_epochs;
        if !ok {
            return Err(FusionError::InvalidConfig(format!("bad training spec: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }
}

enum Optimizer {
    AdamW { m: Vec<Matrix>, v: Vec<Matrix>, step: i32 },
    Sgd,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &FusionParams) -> Self {
        match kind {
            OptimizerKind::AdamW => {
                let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
                Optimizer::AdamW { m: zeros.clone(), v: zeros, step: 0 }
            }
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    fn step(&mut self, params: &mut FusionParams, grads: &FusionParams, lr: f64, decay: f64) {
        match self {
            Optimizer::AdamW { m, v, step } => {
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(m).zip(v) {
                    let it = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
                    for (((p, &g), m), v) in it {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                        *p -= lr * (update + decay * *p);
                    }
                }
            }
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, &g) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *p -= lr * (g + decay * *p);
                    }
                }
            }
        }
    }
}

fn labeled(set: &EmbeddingSet, num_classes: usize) -> Result<Vec<usize>, FusionError> {
    let labels = set.labels()?;
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(FusionError::LabelOutOfRange { label, num_classes });
    }
    Ok(labels)
}

/// Fraction of records whose argmax prediction equals the gold label.
pub fn accuracy(model: &FusionModel, records: &[EmbeddingRecord], labels: &[usize]) -> Result<f64, FusionError> {
    let preds = model.infer_all(records)?;
    let correct = preds.iter().zip(labels).filter(|((_, p), &y)| p.argmax() == y).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Trains from a freshly initialized model seeded by `spec.seed`. Returns
/// the parameters of the best validation epoch (earliest on ties).
pub fn train(
    train_set: &EmbeddingSet,
    valid_set: &EmbeddingSet,
    config: &FusionConfig,
    spec: &TrainSpec,
) -> Result<(FusionParams, TrainingLog), FusionError> {
    config.check_dims(&train_set.dims)?;
    config.check_dims(&valid_set.dims)?;
    if valid_set.records.is_empty() {
        return Err(FusionError::EmptySplit("validation"));
    }
    let valid_labels = labeled(valid_set, config.num_classes)?;
    train_with(train_set, config, spec, |model| accuracy(model, &valid_set.records, &valid_labels))
}

/// Training loop with a caller-supplied validation metric (higher is better).
pub(crate) fn train_with<F>(
    train_set: &EmbeddingSet,
    config: &FusionConfig,
    spec: &TrainSpec,
    mut validate: F,
) -> Result<(FusionParams, TrainingLog), FusionError>
where
    F: FnMut(&FusionModel) -> Result<f64, FusionError>,
{
    config.validate()?;
    spec.validate()?;
    config.check_dims(&train_set.dims)?;
    if train_set.records.is_empty() {
        return Err(FusionError::EmptySplit("training"));
    }
    let labels = labeled(train_set, config.num_classes)?;
    let weights =
        if spec.weighted_loss { class_weights(&labels, config.num_classes)? } else { vec![1.0; config.num_classes] };

    let mut rng = Rng::new(spec.seed);
    let mut model = FusionModel { config: config.clone(), params: FusionParams::init(config, &mut rng) };
    let mut optimizer = Optimizer::new(spec.optimizer, &model.params);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, FusionParams)> = None;
    let mut stale = 0;

    for epoch in 1..=spec.max_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(spec.batch_size).enumerate() {
            let recs: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| &train_set.records[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = loss_and_grad(&model, &recs, &ys, &weights, Some(&mut rng))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(FusionError::NonFiniteLoss { epoch, batch });
            }
            total += loss * chunk.len() as f64;
            optimizer.step(&mut model.params, &grads, spec.learning_rate, spec.weight_decay);
        }
        let valid_accuracy = validate(&model)?;
        log.epochs.push(EpochLog { epoch, train_loss: total / labels.len() as f64, valid_accuracy });

        if best.as_ref().is_none_or(|(acc, _)| valid_accuracy > *acc) {
            best = Some((valid_accuracy, model.params.clone()));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                log.stopped_early = epoch < spec.max_epochs;
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch").1, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EmbeddingDims;

    fn config() -> FusionConfig {
        FusionConfig { d_v: 4, d_t: 8, seq_len: 3, heads: 2, num_classes: 2, dropout: 0.1, hidden_dim: 8 }
    }

    /// Class sign is carried by the image embedding and the first token.
    fn separable(n: usize, seed: u64) -> EmbeddingSet {
        let cfg = config();
        let dims = cfg.embedding_dims();
        let mut rng = Rng::new(seed);
        let mut set = EmbeddingSet::new(dims);
        for i in 0..n {
            let y = i % 2;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let mut image: Vec<f32> = (0..dims.d_v).map(|_| (0.3 * rng.normal()) as f32).collect();
            image[0] += (2.0 * sign) as f32;
            let mut tokens: Vec<f32> = (0..dims.seq_len * dims.d_t).map(|_| (0.3 * rng.normal()) as f32).collect();
            tokens[0] += (2.0 * sign) as f32;
            set.records.push(EmbeddingRecord {
                id: format!("s{i}"),
                label: Some(y),
                image_embedding: image,
                token_embeddings: tokens,
                attention_mask: vec![true; dims.seq_len],
                caption: None,
            });
        }
        set
    }

    #[test]
    fn patience_one_stops_after_first_stale_epoch() {
        let set = separable(20, 1);
        let spec = TrainSpec { patience: 1, max_epochs: 10, batch_size: 4, learning_rate: 1e-2, ..Default::default() };
        let mut snapshots = Vec::new();
        let (params, log) = train_with(&set, &config(), &spec, |m| {
            snapshots.push(m.params.clone());
            Ok(0.5)
        })
        .unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.best_epoch, 1);
        assert!(log.stopped_early);
        assert_eq!(params, snapshots[0]);
        assert_ne!(params, snapshots[1]);
    }

    #[test]
    fn same_seed_same_params() {
        let set = separable(24, 2);
        let spec = TrainSpec { max_epochs: 3, batch_size: 5, learning_rate: 1e-3, ..Default::default() };
        let a = train(&set, &set, &config(), &spec).unwrap();
        let b = train(&set, &set, &config(), &spec).unwrap();
        assert_eq!(a, b);
        let c = train(&set, &set, &config(), &TrainSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn learns_separable_task() {
        let train_set = separable(60, 3);
        let valid_set = separable(20, 4);
        for optimizer in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
            let lr = if optimizer == OptimizerKind::AdamW { 1e-2 } else { 5e-2 };
            let spec = TrainSpec {
                max_epochs: 30,
                patience: 30,
                batch_size: 8,
                learning_rate: lr,
                optimizer,
                ..Default::default()
            };
            let (params, log) = train(&train_set, &valid_set, &config(), &spec).unwrap();
            let model = FusionModel { config: config(), params };
            let acc = accuracy(&model, &train_set.records, &train_set.labels().unwrap()).unwrap();
            assert!(acc >= 0.95, "{optimizer:?}: train accuracy {acc}");
            assert!(log.epochs.first().unwrap().train_loss > log.epochs.last().unwrap().train_loss);
        }
    }

    #[test]
    fn log_lines_are_json() {
        let log = TrainingLog {
            epochs: vec![EpochLog { epoch: 1, train_loss: 0.5, valid_accuracy: 0.75 }],
            best_epoch: 1,
            stopped_early: false,
        };
        let line = log.to_json_lines();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["valid_accuracy"], 0.75);
    }

    #[test]
    fn rejects_bad_inputs() {
        let set = separable(4, 5);
        let bad = TrainSpec { patience: 30, ..Default::default() };
        assert!(matches!(train(&set, &set, &config(), &bad), Err(FusionError::InvalidConfig(_))));
        let other = EmbeddingSet::new(EmbeddingDims { d_v: 5, seq_len: 3, d_t: 8 });
        assert!(train(&set, &other, &config(), &TrainSpec::default()).is_err());
        let mut unlabeled = set.clone();
        unlabeled.records[0].label = None;
        assert!(train(&unlabeled, &set, &config(), &TrainSpec::default()).is_err());
    }
}
