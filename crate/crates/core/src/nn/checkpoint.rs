//! JSON model checkpoints. Floats use shortest round-trip formatting and
//! correctly rounded parsing, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::util;

pub const CHECKPOINT_FORMAT: &str = "detcal-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    model: ModelParams,
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let env = Envelope {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&env)?;
    util::write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = util::read_to_string(path)?;
    let env: Envelope = serde_json::from_str(&text)?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(Error::Serde(format!(
            "{}: unsupported checkpoint format `{}`",
            path.display(),
            env.format
        )));
    }
    env.model.validate()?;
    Ok(env.model)
}
