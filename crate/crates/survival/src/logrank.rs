use crate::error::{Result, SurvivalError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurvivalGroup {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl SurvivalGroup {
    pub fn new(times: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if times.len() != events.len() {
            return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
        }
        Ok(Self { times, events })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogrankResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Observed minus expected events in the first group.
    pub observed_minus_expected: f64,
    pub variance: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        libm::erfc((x / 2.0).sqrt())
    }
}

/// Two-group logrank test (hypergeometric variance, 1 degree of freedom).
pub fn logrank_test(a: &SurvivalGroup, b: &SurvivalGroup) -> Result<LogrankResult> {
    if a.is_empty() || b.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if a.times.iter().chain(&b.times).any(|t| !t.is_finite()) {
        return Err(SurvivalError::NonFinite("times"));
    }
    let mut all: Vec<(f64, bool, bool)> = a
        .times
        .iter()
        .zip(&a.events)
        .map(|(&t, &e)| (t, e, true))
        .chain(b.times.iter().zip(&b.events).map(|(&t, &e)| (t, e, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut n_a = a.len() as f64;
    let mut n_b = b.len() as f64;
    let mut o_minus_e = 0.0;
    let mut variance = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let mut j = i;
        let (mut d_a, mut d, mut left_a, mut left_b) = (0.0, 0.0, 0.0, 0.0);
        while j < all.len() && all[j].0 == t {
            let (_, event, in_a) = all[j];
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                left_a += 1.0;
            } else {
                left_b += 1.0;
            }
            j += 1;
        }
        let n = n_a + n_b;
        if d > 0.0 {
            let expected = d * n_a / n;
            o_minus_e += d_a - expected;
            if n > 1.0 {
                variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= left_a;
        n_b -= left_b;
        i = j;
    }
    let statistic = if variance > 0.0 {
        o_minus_e * o_minus_e / variance
    } else {
        0.0
    };
    Ok(LogrankResult {
        statistic,
        p_value: chi2_1_sf(statistic),
        observed_minus_expected: o_minus_e,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_groups_give_zero_statistic() {
        let g = SurvivalGroup::new(vec![1.0, 3.0, 5.0, 7.0], vec![true, false, true, true]).unwrap();
        let r = logrank_test(&g, &g).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_tail_reference_points() {
        assert!((chi2_1_sf(3.841_458_820_694_124) - 0.05).abs() < 1e-9);
        assert!((chi2_1_sf(6.634_896_601_021_214) - 0.01).abs() < 1e-9);
        assert_eq!(chi2_1_sf(0.0), 1.0);
    }

    #[test]
    fn group_without_events_still_returns_a_statistic() {
        let a = SurvivalGroup::new(vec![1.0, 2.0], vec![false, false]).unwrap();
        let b = SurvivalGroup::new(vec![1.5, 2.5], vec![true, true]).unwrap();
        let r = logrank_test(&a, &b).unwrap();
        assert!(r.statistic >= 0.0);
    }

    #[test]
    fn empty_group_errors() {
        let a = SurvivalGroup::default();
        let b = SurvivalGroup::new(vec![1.0], vec![true]).unwrap();
        assert_eq!(logrank_test(&a, &b), Err(SurvivalError::Empty));
    }
}
