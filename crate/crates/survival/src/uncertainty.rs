//! Monte-Carlo dropout uncertainty and the Youden-optimal confidence cutoff.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SurvivalError};

/// A model that can run a forward pass with dropout active.
pub trait StochasticModel {
    type Input;

    /// High-risk probability for every instance of `input` under one dropout draw.
    fn stochastic_pass(&self, input: &Self::Input, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub mean_prob: Vec<f64>,
    pub per_instance_std: Vec<f64>,
    pub threshold: Option<f64>,
    pub youden_j: Option<f64>,
    pub confident_mask: Vec<bool>,
}

impl UncertaintyReport {
    /// Applies a cutoff: an instance is confident when its std is below it.
    pub fn apply_threshold(&mut self, threshold: f64, youden_j: f64) {
        self.threshold = Some(threshold);
        self.youden_j = Some(youden_j);
        self.confident_mask = self.per_instance_std.iter().map(|&s| s < threshold).collect();
    }
}

/// Runs `passes` dropout-active forward passes and summarizes each instance.
pub fn mc_dropout_uncertainty<M: StochasticModel>(
    model: &M,
    input: &M::Input,
    passes: usize,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UncertaintyReport> {
    if passes < 2 {
        return Err(SurvivalError::TooFewPasses(passes));
    }
    let draws: Vec<Vec<f64>> = (0..passes)
        .map(|_| model.stochastic_pass(input, dropout_rate, rng))
        .collect();
    let n = draws[0].len();
    if let Some(bad) = draws.iter().find(|d| d.len() != n) {
        return Err(SurvivalError::LengthMismatch(n, bad.len()));
    }
    let mut mean_prob = vec![0.0; n];
    let mut per_instance_std = vec![0.0; n];
    for i in 0..n {
        let mean = draws.iter().map(|d| d[i]).sum::<f64>() / passes as f64;
        let var = draws.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / passes as f64;
        mean_prob[i] = mean;
        // Identical draws must give exactly zero.
        per_instance_std[i] = if draws.iter().all(|d| d[i] == draws[0][i]) {
            0.0
        } else {
            var.sqrt()
        };
    }
    Ok(UncertaintyReport {
        mean_prob,
        per_instance_std,
        threshold: None,
        youden_j: None,
        confident_mask: vec![true; n],
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YoudenResult {
    pub threshold: f64,
    pub j: f64,
}

/// Candidate cutoffs: the smallest value, midpoints between consecutive
/// distinct values, and a point just above the largest value.
pub fn candidate_thresholds(uncertainties: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = uncertainties.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut out = Vec::with_capacity(u.len() + 1);
    if let (Some(&lo), Some(&hi)) = (u.first(), u.last()) {
        out.push(lo);
        out.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(hi.next_up());
    }
    out
}

/// Youden index at every candidate cutoff, sweeping the sorted values once.
/// An instance is predicted "correct" when its uncertainty is below the cutoff.
pub fn youden_curve(uncertainties: &[f64], correct: &[bool]) -> Result<Vec<YoudenResult>> {
    if uncertainties.len() != correct.len() {
        return Err(SurvivalError::LengthMismatch(uncertainties.len(), correct.len()));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(SurvivalError::NonFinite("uncertainties"));
    }
    let positives = correct.iter().filter(|&&c| c).count();
    let negatives = correct.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SurvivalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    for threshold in candidate_thresholds(uncertainties) {
        while k < order.len() && uncertainties[order[k]] < threshold {
            if correct[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let j = tp as f64 / positives as f64 - fp as f64 / negatives as f64;
        curve.push(YoudenResult { threshold, j });
    }
    Ok(curve)
}

/// Cutoff maximizing the Youden index; ties resolve to the smallest cutoff.
pub fn youden_threshold(uncertainties: &[f64], correct: &[bool]) -> Result<YoudenResult> {
    let curve = youden_curve(uncertainties, correct)?;
    let mut best = curve[0];
    for c in &curve[1..] {
        if c.j > best.j {
            best = *c;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    struct Noisy(f64);

    impl StochasticModel for Noisy {
        type Input = Vec<f64>;
        fn stochastic_pass(&self, input: &Vec<f64>, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
            input
                .iter()
                .map(|&p| if rate > 0.0 { p + self.0 * rng.random_range(-1.0..1.0) } else { p })
                .collect()
        }
    }

    #[test]
    fn zero_dropout_gives_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = mc_dropout_uncertainty(&Noisy(0.1), &vec![0.2, 0.7], 30, 0.0, &mut rng).unwrap();
        assert_eq!(r.per_instance_std, vec![0.0, 0.0]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            mc_dropout_uncertainty(&Noisy(0.1), &vec![0.2, 0.7], 30, 0.1, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
        assert!(run().per_instance_std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn one_pass_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            mc_dropout_uncertainty(&Noisy(0.1), &vec![0.2], 1, 0.1, &mut rng),
            Err(SurvivalError::TooFewPasses(1))
        );
    }

    #[test]
    fn separable_case_returns_the_gap_midpoint() {
        let u = [0.05, 0.1, 0.2, 0.8, 0.9];
        let c = [true, true, true, false, false];
        let r = youden_threshold(&u, &c).unwrap();
        assert_eq!(r.j, 1.0);
        assert!((r.threshold - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        assert_eq!(
            youden_threshold(&[0.1, 0.2], &[true, true]),
            Err(SurvivalError::SingleClass)
        );
    }

    #[test]
    fn report_mask_follows_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = mc_dropout_uncertainty(&Noisy(0.0), &vec![0.1, 0.2], 3, 0.0, &mut rng).unwrap();
        r.per_instance_std = vec![0.1, 0.3];
        r.apply_threshold(0.2, 1.0);
        assert_eq!(r.confident_mask, vec![true, false]);
    }
}
