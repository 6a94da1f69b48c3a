//! Harrell's concordance index.
//!
//! A pair (i, j) is comparable when `T_i < T_j` and patient i had the event;
//! it is concordant when `risk_i > risk_j` and counts one half on a risk tie.
//! Censored patients therefore only ever appear as the later member of a pair.

use crate::error::{Result, SurvivalError};

/// Pair counts behind a concordance value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied_risk: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Option<f64> {
        (self.comparable > 0)
            .then(|| (self.concordant as f64 + 0.5 * self.tied_risk as f64) / self.comparable as f64)
    }
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, pos: usize) {
        let mut i = pos + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted positions `< pos`.
    fn prefix(&self, pos: usize) -> u64 {
        let mut i = pos;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn validate(times: &[f64], events: &[bool], risks: &[f64]) -> Result<()> {
    if times.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
    }
    if times.len() != risks.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), risks.len()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(SurvivalError::NonFinite("times"));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(SurvivalError::NonFinite("risks"));
    }
    Ok(())
}

/// Pair counts in O(n log n): sweep times from latest to earliest while a
/// Fenwick tree over risk ranks holds every strictly later patient.
pub fn concordance_counts(times: &[f64], events: &[bool], risks: &[f64]) -> Result<ConcordanceCounts> {
    validate(times, events, risks)?;
    let n = times.len();
    // Adding 0.0 maps -0.0 to 0.0, so signed zeros share a rank and count as a tie.
    let mut sorted_risks: Vec<f64> = risks.iter().map(|r| r + 0.0).collect();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| {
        sorted_risks
            .binary_search_by(|x| x.total_cmp(&(r + 0.0)))
            .expect("risk present in its own rank table")
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(sorted_risks.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[order[end]] == times[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if !events[i] {
                continue;
            }
            let r = rank(risks[i]);
            let lower = tree.prefix(r);
            let lower_or_equal = tree.prefix(r + 1);
            counts.concordant += lower;
            counts.tied_risk += lower_or_equal - lower;
            counts.comparable += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

pub fn concordance_index(times: &[f64], events: &[bool], risks: &[f64]) -> Result<f64> {
    concordance_counts(times, events, risks)?
        .index()
        .ok_or(SurvivalError::NoComparablePairs)
}
