//! Deterministic, risk-stratified assignment of tumor patients to folds.

use std::collections::BTreeMap;

use dcmil_core::rng::stream;
use dcmil_core::{Bag, RiskStatus};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

fn stratum(status: RiskStatus) -> usize {
    match status {
        RiskStatus::High => 0,
        RiskStatus::Low => 1,
        RiskStatus::Undefined => 2,
    }
}

/// Shuffles each risk stratum and deals its members round-robin, continuing
/// the rotation across strata so fold sizes differ by at most one.
fn deal(bags: &[&Bag], k: usize, seed: u64, label: &str) -> Vec<(String, usize)> {
    let mut strata: [Vec<&str>; 3] = Default::default();
    for b in bags {
        strata[stratum(b.risk_status())].push(b.patient_id());
    }
    let mut out = Vec::with_capacity(bags.len());
    let mut next = 0;
    for (s, ids) in strata.iter_mut().enumerate() {
        ids.sort_unstable();
        ids.shuffle(&mut stream(seed, &format!("{label}/{s}")));
        for id in ids.iter() {
            out.push((id.to_string(), next % k));
            next += 1;
        }
    }
    out
}

impl FoldPlan {
    /// Partitions the tumor bags into `k` folds. Normal bags are never assigned.
    pub fn new(bags: &[Bag], k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(TrainError::Invalid(format!("cross-validation needs at least 2 folds, got {k}")));
        }
        let tumor: Vec<&Bag> = bags.iter().filter(|b| b.is_tumor()).collect();
        if tumor.len() < k {
            return Err(TrainError::Invalid(format!(
                "{} tumor patients cannot fill {k} folds",
                tumor.len()
            )));
        }
        let mut assignments = BTreeMap::new();
        for (id, f) in deal(&tumor, k, seed, "folds") {
            if assignments.insert(id.clone(), f).is_some() {
                return Err(TrainError::Invalid(format!("duplicate patient id {id}")));
            }
        }
        Ok(Self { k, assignments })
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignments.get(patient_id).copied()
    }

    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Stratified hold-out of roughly `fraction` of `bags` for early stopping.
/// Returns (train, validation) preserving the input order.
pub fn validation_split<'a>(bags: &[&'a Bag], fraction: f64, seed: u64, label: &str) -> (Vec<&'a Bag>, Vec<&'a Bag>) {
    if fraction <= 0.0 || bags.len() < 2 {
        return (bags.to_vec(), Vec::new());
    }
    let k = (1.0 / fraction).round().max(2.0) as usize;
    let dealt: BTreeMap<String, usize> = deal(bags, k, seed, label).into_iter().collect();
    let (val, train): (Vec<&Bag>, Vec<&Bag>) = bags.iter().partition(|b| dealt[b.patient_id()] == 0);
    (train, val)
}

/// Order-independent digest of a set of patient ids.
pub fn id_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut v: Vec<&str> = ids.into_iter().collect();
    v.sort_unstable();
    let mut h = Sha256::new();
    for id in v {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
