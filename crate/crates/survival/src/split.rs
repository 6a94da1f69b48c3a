use crate::error::{Result, SurvivalError};
use crate::logrank::SurvivalGroup;

/// Median of a nonempty sample (average of the two middle values when even).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SurvivalError::NonFinite("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Splits patients at `cutoff`: risk above it goes to the high-risk group.
pub fn split_by_risk(
    times: &[f64],
    events: &[bool],
    risks: &[f64],
    cutoff: f64,
) -> Result<(SurvivalGroup, SurvivalGroup)> {
    if times.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
    }
    if times.len() != risks.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), risks.len()));
    }
    let mut high = SurvivalGroup::default();
    let mut low = SurvivalGroup::default();
    for ((&t, &e), &r) in times.iter().zip(events).zip(risks) {
        let g = if r > cutoff { &mut high } else { &mut low };
        g.times.push(t);
        g.events.push(e);
    }
    Ok((high, low))
}

/// Median split of predicted risks into (high, low) groups.
pub fn median_split(times: &[f64], events: &[bool], risks: &[f64]) -> Result<(SurvivalGroup, SurvivalGroup)> {
    split_by_risk(times, events, risks, median(risks)?)
}
