use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Ternary risk stratification derived from follow-up time and event status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiskStatus {
    High,
    Low,
    Undefined,
}

impl RiskStatus {
    /// Binary training label (HIGH = 1, LOW = 0), `None` when undefined.
    pub fn label(self) -> Option<u8> {
        match self {
            RiskStatus::High => Some(1),
            RiskStatus::Low => Some(0),
            RiskStatus::Undefined => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskStatus::High => "HIGH",
            RiskStatus::Low => "LOW",
            RiskStatus::Undefined => "UNDEFINED",
        }
    }
}

/// HIGH when the event happened at or before `threshold_months`, LOW when
/// follow-up exceeds the threshold, UNDEFINED when censored at or before it.
pub fn risk_status(time_months: f64, event: bool, threshold_months: f64) -> Result<RiskStatus> {
    if !(time_months >= 0.0) || !time_months.is_finite() {
        return Err(CoreError::InvalidInput(format!(
            "survival time must be a finite nonnegative number, got {time_months}"
        )));
    }
    if !(threshold_months > 0.0) {
        return Err(CoreError::InvalidInput(format!(
            "risk threshold must be positive, got {threshold_months}"
        )));
    }
    Ok(if time_months > threshold_months {
        RiskStatus::Low
    } else if event {
        RiskStatus::High
    } else {
        RiskStatus::Undefined
    })
}
