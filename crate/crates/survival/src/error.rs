use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("input arrays differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("no comparable pairs: concordance is undefined")]
    NoComparablePairs,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("need both correct and incorrect predictions to pick a threshold")]
    SingleClass,
    #[error("need at least two stochastic passes, got {0}")]
    TooFewPasses(usize),
    #[error("representation width mismatch ({0} vs {1})")]
    WidthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, SurvivalError>;
