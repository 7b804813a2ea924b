//! Rule-based relabelling of MIMOSA aggression labels into the BHM hate
//! taxonomy. Operates on JSON-lines manifests only; embeddings are untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{classes, DatasetError};
use crate::math::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapAction {
    /// Hateful, with the given Task 2 target class.
    MapTo(usize),
    /// Non-hateful; no Task 2 label.
    KeepNonHate,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapOutcome {
    Hate { target: usize },
    NonHate,
    Discard,
}

impl RemapOutcome {
    pub fn task1_label(self) -> Option<usize> {
        match self {
            RemapOutcome::Hate { .. } => Some(classes::HATE),
            RemapOutcome::NonHate => Some(classes::NON_HATE),
            RemapOutcome::Discard => None,
        }
    }

    pub fn task2_label(self) -> Option<usize> {
        match self {
            RemapOutcome::Hate { target } => Some(target),
            _ => None,
        }
    }
}

/// Source label → action. Lookup is case-insensitive.
#[derive(Debug, Clone)]
pub struct RemapRules {
    rules: BTreeMap<String, RemapAction>,
}

impl RemapRules {
    /// The MIMOSA table: Political→TO, Gender→TI, Religious→TC,
    /// Non-aggression→Non-Hate, Others discarded.
    pub fn mimosa() -> Self {
        let mut rules = Self { rules: BTreeMap::new() };
        rules.insert("Political", RemapAction::MapTo(classes::TO));
        rules.insert("Gender", RemapAction::MapTo(classes::TI));
        rules.insert("Religious", RemapAction::MapTo(classes::TC));
        rules.insert("Others", RemapAction::Discard);
        rules.insert("Non-aggression", RemapAction::KeepNonHate);
        rules
    }

    pub fn insert(&mut self, source: &str, action: RemapAction) {
        self.rules.insert(source.trim().to_lowercase(), action);
    }

    pub fn get(&self, source: &str) -> Option<RemapAction> {
        self.rules.get(&source.trim().to_lowercase()).copied()
    }
}

impl Default for RemapRules {
    fn default() -> Self {
        Self::mimosa()
    }
}

pub fn remap_label(source: &str, rules: &RemapRules) -> Result<RemapOutcome, DatasetError> {
    match rules.get(source) {
        Some(RemapAction::MapTo(target)) => Ok(RemapOutcome::Hate { target }),
        Some(RemapAction::KeepNonHate) => Ok(RemapOutcome::NonHate),
        Some(RemapAction::Discard) => Ok(RemapOutcome::Discard),
        None => Err(DatasetError::UnknownSourceLabel(source.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_label: String,
}

/// One output line. Discarded rows carry `task1_label = -1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapRow {
    pub id: String,
    pub task1_label: i32,
    pub task2_label: Option<i32>,
    pub discarded: bool,
}

/// Remaps every entry. `keep_non_hate` is the fraction of non-hateful rows
/// retained; exactly `round(fraction · count)` of them survive, chosen by a
/// seeded shuffle, and the rest are flagged discarded.
pub fn remap_manifest(
    entries: &[ManifestEntry],
    rules: &RemapRules,
    keep_non_hate: f64,
    seed: u64,
) -> Result<Vec<RemapRow>, DatasetError> {
    if !(0.0..=1.0).contains(&keep_non_hate) {
        return Err(DatasetError::InvalidKeepFraction(keep_non_hate));
    }
    let outcomes = entries.iter().map(|e| remap_label(&e.source_label, rules)).collect::<Result<Vec<_>, _>>()?;

    let mut non_hate: Vec<usize> =
        outcomes.iter().enumerate().filter(|(_, o)| **o == RemapOutcome::NonHate).map(|(i, _)| i).collect();
    let keep = (keep_non_hate * non_hate.len() as f64).round() as usize;
    let mut dropped = vec![false; entries.len()];
    if keep < non_hate.len() {
        Rng::new(seed).shuffle(&mut non_hate);
        for &i in &non_hate[keep..] {
            dropped[i] = true;
        }
    }

    Ok(entries
        .iter()
        .zip(&outcomes)
        .zip(&dropped)
        .map(|((e, &o), &drop)| {
            let o = if drop { RemapOutcome::Discard } else { o };
            RemapRow {
                id: e.id.clone(),
                task1_label: o.task1_label().map_or(-1, |l| l as i32),
                task2_label: o.task2_label().map(|l| l as i32),
                discarded: o == RemapOutcome::Discard,
            }
        })
        .collect())
}
