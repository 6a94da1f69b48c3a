use std::path::PathBuf;

use dcmil_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("patient {patient}: manifest line {line} is missing magnification level {level}")]
    MissingLevel {
        patient: String,
        line: usize,
        level: usize,
    },
    #[error("cannot read image {path}: {msg}")]
    UnreadableImage { path: PathBuf, msg: String },
    #[error("tile {path} has side {side}, which is not a multiple of 16")]
    TileSide { path: PathBuf, side: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, DataError>;
