//! Confusion matrices, macro precision/recall/F1 and bootstrap intervals.
//!
//! A prediction may be an abstention (`pred = None`, e.g. an unparseable
//! service reply). Abstentions count against recall of the gold class and
//! against no class's precision.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::Rng;

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions")]
    EmptyInput,
    #[error("bootstrap needs at least 2 predictions, got {0}")]
    TooFewSamples(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("duplicate prediction id {0:?}")]
    DuplicateId(String),
    #[error("confidence {0} outside (0, 1)")]
    BadConfidence(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// `None` is an abstention.
    #[serde(alias = "label")]
    pub pred: Option<usize>,
    pub gold: usize,
}

/// Predictions with unique ids and labels inside the taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    num_classes: usize,
    items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(items: Vec<Prediction>, num_classes: usize) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for p in &items {
            for label in std::iter::once(p.gold).chain(p.pred) {
                if label >= num_classes {
                    return Err(EvalError::LabelOutOfRange { label, num_classes });
                }
            }
            if !seen.insert(p.id.as_str()) {
                return Err(EvalError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { num_classes, items })
    }

    /// Builds a set from parallel label slices with ids `"0"`, `"1"`, ….
    pub fn from_labels(preds: &[usize], gold: &[usize], num_classes: usize) -> Result<Self, EvalError> {
        let items = preds
            .iter()
            .zip(gold)
            .enumerate()
            .map(|(i, (&p, &g))| Prediction { id: i.to_string(), pred: Some(p), gold: g })
            .collect();
        Self::new(items, num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn items(&self) -> &[Prediction] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Reads JSON lines `{"id", "pred", "gold"}`; `"label"` is accepted for
    /// `"pred"` and `null` marks an abstention. Blank lines are skipped.
    pub fn from_json_lines(text: &str, num_classes: usize) -> Result<Self, EvalError> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: Prediction =
                serde_json::from_str(line).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
            items.push(p);
        }
        Self::new(items, num_classes)
    }
}

/// Counts indexed `[gold][pred]`, plus abstentions per gold class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
    pub abstained: Vec<usize>,
}

impl Confusion {
    pub fn zeros(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes], abstained: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    fn add(&mut self, pred: Option<usize>, gold: usize) {
        match pred {
            Some(p) => self.counts[gold][p] += 1,
            None => self.abstained[gold] += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.abstained.iter().sum::<usize>()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum::<usize>() + self.abstained[class]
    }
}

pub fn confusion(preds: &PredictionSet) -> Result<Confusion, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut m = Confusion::zeros(preds.num_classes);
    for p in &preds.items {
        m.add(p.pred, p.gold);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceHalfWidths {
    pub iterations: usize,
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub abstentions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<ConfidenceHalfWidths>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro metrics. Macro means run over classes with gold
/// support only.
pub fn macro_prf(m: &Confusion) -> Result<MetricReport, EvalError> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyInput);
    }
    let c = m.num_classes();
    let mut classes = Vec::with_capacity(c);
    let (mut sp, mut sr, mut sf, mut counted, mut correct) = (0.0, 0.0, 0.0, 0, 0);
    for k in 0..c {
        let tp = m.counts[k][k];
        let predicted: usize = (0..c).map(|g| m.counts[g][k]).sum();
        let support = m.support(k);
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if support > 0 {
            sp += precision;
            sr += recall;
            sf += f1;
            counted += 1;
        }
        correct += tp;
        classes.push(ClassMetrics { class: k, precision, recall, f1, support });
    }
    let n = counted as f64;
    Ok(MetricReport {
        classes,
        macro_precision: sp / n,
        macro_recall: sr / n,
        macro_f1: sf / n,
        accuracy: ratio(correct, total),
        abstentions: m.abstained.iter().sum(),
        ci: None,
    })
}

/// Confusion and metrics in one step.
pub fn evaluate(preds: &PredictionSet) -> Result<MetricReport, EvalError> {
    macro_prf(&confusion(preds)?)
}

/// Macro F1 of label slices; abstentions are not representable here.
pub fn macro_f1(preds: &[usize], gold: &[usize], num_classes: usize) -> Result<f64, EvalError> {
    Ok(evaluate(&PredictionSet::from_labels(preds, gold, num_classes)?)?.macro_f1)
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile-bootstrap half-widths of the macro metrics. Iteration `i`
/// draws from its own generator seeded with `seed + i`, so the result does
/// not depend on how iterations are scheduled.
pub fn bootstrap_ci(
    preds: &PredictionSet,
    iterations: usize,
    confidence: f64,
    seed: u64,
) -> Result<ConfidenceHalfWidths, EvalError> {
    let n = preds.len();
    if n < 2 {
        return Err(if n == 0 { EvalError::EmptyInput } else { EvalError::TooFewSamples(n) });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::BadConfidence(confidence));
    }
    let iterations = iterations.max(1);
    let stats: Vec<[f64; 3]> = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(seed.wrapping_add(i as u64));
            let mut m = Confusion::zeros(preds.num_classes);
            for _ in 0..n {
                let p = &preds.items[rng.below(n)];
                m.add(p.pred, p.gold);
            }
            let r = macro_prf(&m).expect("non-empty resample");
            [r.macro_precision, r.macro_recall, r.macro_f1]
        })
        .collect();
    let tail = (1.0 - confidence) / 2.0;
    let half_width = |j: usize| {
        let mut xs: Vec<f64> = stats.iter().map(|s| s[j]).collect();
        xs.sort_by(f64::total_cmp);
        (percentile(&xs, 1.0 - tail) - percentile(&xs, tail)) / 2.0
    };
    Ok(ConfidenceHalfWidths {
        iterations,
        confidence,
        precision: half_width(0),
        recall: half_width(1),
        f1: half_width(2),
    })
}

impl MetricReport {
    /// Per-class table followed by the macro row.
    pub fn to_table(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>9}", "Class", "Precision", "Recall", "F1", "Support");
        for c in &self.classes {
            let name = class_names.get(c.class).map(|s| s.to_string()).unwrap_or_else(|| c.class.to_string());
            let _ = writeln!(out, "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9}", name, c.precision, c.recall, c.f1, c.support);
        }
        let support: usize = self.classes.iter().map(|c| c.support).sum();
        let _ = writeln!(
            out,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9}",
            "Macro", self.macro_precision, self.macro_recall, self.macro_f1, support
        );
        if let Some(ci) = &self.ci {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4}",
                format!("±{:.0}% CI", ci.confidence * 100.0),
                ci.precision,
                ci.recall,
                ci.f1
            );
        }
        out
    }
}
