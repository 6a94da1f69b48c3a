use dcmil_core::CoreError;
use dcmil_dataio::DataError;
use dcmil_encoder::EncoderError;
use dcmil_softbag::SoftBagError;
use dcmil_survival::SurvivalError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    /// The inputs cannot support the requested run (bad config, missing labels, too few patients).
    #[error("invalid run: {0}")]
    Invalid(String),
    /// A prerequisite artifact is absent.
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    SoftBag(#[from] SoftBagError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// True for errors caused by the caller's inputs rather than by a failure mid-run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TrainError::Invalid(_)
                | TrainError::Missing(_)
                | TrainError::Core(
                    CoreError::InvalidInput(_)
                        | CoreError::ConfigSyntax { .. }
                        | CoreError::ConfigValue { .. }
                        | CoreError::UnknownKey(_)
                )
                | TrainError::Data(
                    DataError::Input(_) | DataError::Manifest { .. } | DataError::MissingLevel { .. }
                )
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
