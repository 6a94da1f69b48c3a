//! Shared foundation for the DCMIL crates: domain types, run configuration,
//! the risk-status discretization, and a small dense reverse-mode autodiff
//! engine used by both training curricula.

pub mod autograd;
pub mod config;
pub mod error;
pub mod kv;
pub mod matrix;
pub mod params;
pub mod risk;
pub mod rng;
pub mod types;

pub use autograd::{finite_difference, relative_error, Grads, Tape, Var};
pub use config::RunConfig;
pub use error::{CoreError, Result};
pub use matrix::Matrix;
pub use params::{Adam, Bound, Optimizer, ParamId, ParamSet, SgdMomentum};
pub use risk::{risk_status, RiskStatus};
pub use types::{Bag, Source, SurvivalRecord, Tile, TilePyramid, TOKEN_SIDE};
