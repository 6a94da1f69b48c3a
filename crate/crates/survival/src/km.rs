use crate::error::{Result, SurvivalError};

/// Product-limit survival estimate evaluated at each distinct event time.
#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    pub event_times: Vec<f64>,
    pub survival_probs: Vec<f64>,
    /// Patients at risk just before each event time.
    pub at_risk_counts: Vec<usize>,
}

impl KmCurve {
    /// Step-function value at time `t` (1 before the first event).
    pub fn survival_at(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for (&et, &p) in self.event_times.iter().zip(&self.survival_probs) {
            if et <= t {
                s = p;
            } else {
                break;
            }
        }
        s
    }

    /// Median survival time, `None` when the curve never drops to 0.5.
    pub fn median(&self) -> Option<f64> {
        self.event_times
            .iter()
            .zip(&self.survival_probs)
            .find(|(_, &p)| p <= 0.5)
            .map(|(&t, _)| t)
    }
}

pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(SurvivalError::NonFinite("times"));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut curve = KmCurve {
        event_times: Vec::new(),
        survival_probs: Vec::new(),
        at_risk_counts: Vec::new(),
    };
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && times[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            curve.event_times.push(t);
            curve.survival_probs.push(s);
            curve.at_risk_counts.push(at_risk);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(curve)
}
