//! Cohort sources: a synthetic generator with a planted prognosis signal and
//! an ingester for pre-tiled PNG directories.

pub mod error;
pub mod ingest;
pub mod synthetic;

pub use error::{DataError, Result};
pub use ingest::{ingest_tiles, read_png, write_cohort, write_ground_truth, write_png, GROUND_TRUTH_FILE, MANIFEST_FILE};
pub use synthetic::{
    draw_outcome, draw_outcomes, generate_cohort, Cohort, GroundTruthRow, SyntheticSpec, TextureParams,
};
