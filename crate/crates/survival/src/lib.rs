//! Survival evaluation: concordance, Kaplan-Meier estimation, logrank tests,
//! Monte-Carlo dropout uncertainty and distance maps.

pub mod concordance;
pub mod distance;
pub mod error;
pub mod km;
pub mod logrank;
pub mod plot;
pub mod split;
pub mod uncertainty;

pub use concordance::{concordance_counts, concordance_index, ConcordanceCounts};
pub use distance::{distance_heatmap, histogram, DistanceMap, HISTOGRAM_BIN_WIDTH};
pub use error::{Result, SurvivalError};
pub use km::{km_estimate, KmCurve};
pub use logrank::{chi2_1_sf, logrank_test, LogrankResult, SurvivalGroup};
pub use split::{median, median_split, split_by_risk};
pub use uncertainty::{
    candidate_thresholds, mc_dropout_uncertainty, youden_curve, youden_threshold, StochasticModel,
    UncertaintyReport, YoudenResult,
};
