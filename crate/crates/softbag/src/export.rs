//! Checkpoints and per-instance indicator exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bag::BagInference;
use crate::error::{Result, SoftBagError};
use crate::model::C2Model;

#[derive(Serialize, Deserialize)]
struct Envelope {
    config_hash: String,
    model: C2Model,
}

pub fn save_checkpoint(path: &Path, model: &C2Model, config_hash: &str) -> Result<()> {
    let env = Envelope {
        config_hash: config_hash.to_string(),
        model: model.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&env)?)?;
    Ok(())
}

/// Loads a checkpoint, refusing it when `expected_hash` is given and differs.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<C2Model> {
    let env: Envelope = serde_json::from_slice(&std::fs::read(path)?)?;
    match expected_hash {
        Some(h) if h != env.config_hash => Err(SoftBagError::Checkpoint(format!(
            "{} was written under config {} but the run uses {h}",
            path.display(),
            env.config_hash
        ))),
        _ => Ok(env.model),
    }
}

/// Writes `patient_id,instance_index,score,selected` rows for every bag.
pub fn write_indicator_csv(path: &Path, bags: &[(&str, &BagInference)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "instance_index", "score", "selected"])?;
    for (pid, inf) in bags {
        for (i, (s, sel)) in inf.scores.iter().zip(&inf.selected).enumerate() {
            w.write_record([pid.to_string(), i.to_string(), format!("{s:.6}"), u8::from(*sel).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
