//! Monte-Carlo dropout confidence of the instance encoder's risk predictions.

use dcmil_core::rng::stream;
use dcmil_core::{Bag, TilePyramid};
use dcmil_encoder::C1Model;
use dcmil_survival::{mc_dropout_uncertainty, youden_threshold, SurvivalError, UncertaintyReport, YoudenResult};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyOutcome {
    /// (patient id, instance index) of each summarized instance.
    pub instances: Vec<(String, usize)>,
    pub labels: Vec<u8>,
    pub report: UncertaintyReport,
    /// Whether the mean prediction matches the bag's risk class.
    pub correct: Vec<bool>,
    /// `None` when every prediction is right, or every one wrong.
    pub youden: Option<YoudenResult>,
}

/// Summarizes `passes` dropout draws over every instance of the labeled tumor
/// bags and picks the Youden-optimal std cutoff.
pub fn uncertainty_run(model: &C1Model, bags: &[&Bag], passes: usize, rate: f64, seed: u64) -> Result<UncertaintyOutcome> {
    let mut pyramids: Vec<TilePyramid> = Vec::new();
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    for bag in bags.iter().filter(|b| b.is_tumor()) {
        let Some(y) = bag.risk_status().label() else {
            continue;
        };
        for (i, p) in bag.instances().iter().enumerate() {
            pyramids.push(p.clone());
            instances.push((bag.patient_id().to_string(), i));
            labels.push(y);
        }
    }
    let mut rng = stream(seed, "mc-dropout");
    let mut report = mc_dropout_uncertainty(model, &pyramids, passes, rate, &mut rng)?;
    let correct: Vec<bool> = report
        .mean_prob
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| (p >= 0.5) == (y == 1))
        .collect();
    let youden = match youden_threshold(&report.per_instance_std, &correct) {
        Ok(y) => {
            report.apply_threshold(y.threshold, y.j);
            Some(y)
        }
        Err(SurvivalError::SingleClass) => {
            log::warn!("predictions are uniformly right or wrong; no confidence cutoff");
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(UncertaintyOutcome {
        instances,
        labels,
        report,
        correct,
        youden,
    })
}
