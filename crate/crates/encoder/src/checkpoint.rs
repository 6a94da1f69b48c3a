//! JSON checkpoints tagged with the hash of the configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};
use crate::model::C1Model;

#[derive(Serialize, Deserialize)]
struct Envelope {
    config_hash: String,
    model: C1Model,
}

pub fn save_checkpoint(path: &Path, model: &C1Model, config_hash: &str) -> Result<()> {
    let env = Envelope {
        config_hash: config_hash.to_string(),
        model: model.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&env)?)?;
    Ok(())
}

/// Loads a checkpoint, refusing it when `expected_hash` is given and differs.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<C1Model> {
    let env: Envelope = serde_json::from_slice(&std::fs::read(path)?)?;
    if let Some(h) = expected_hash {
        if h != env.config_hash {
            return Err(EncoderError::Checkpoint(format!(
                "{} was written under config {} but the run uses {h}",
                path.display(),
                env.config_hash
            )));
        }
    }
    Ok(env.model)
}
