use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, SpeakerAttributedModel};
use crate::tensor::{read_dump, write_dump, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad model config: {source}")]
    Config { path: String, source: serde_json::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const PARAMS_MANIFEST: &str = "params.manifest";

/// Write config and parameters into `dir` (created if missing).
pub fn save_checkpoint<F: Scalar>(model: &SpeakerAttributedModel<F>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let cfg = serde_json::to_string_pretty(&model.config).expect("config serializes");
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg).map_err(|source| CheckpointError::Io {
        path: cfg_path.display().to_string(),
        source,
    })?;
    let entries: Vec<(&str, &crate::tensor::Tensor<F>)> =
        model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    write_dump(&dir.join(PARAMS_BIN), &dir.join(PARAMS_MANIFEST), &entries)?;
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<ModelConfig, CheckpointError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Config {
        path: path.display().to_string(),
        source,
    })
}

/// Load a checkpoint written by [`save_checkpoint`]. Every parameter must be
/// present with the expected shape; anything else is an error.
pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<SpeakerAttributedModel<F>, CheckpointError> {
    let config = read_config(dir)?;
    let mut model = SpeakerAttributedModel::<F>::new(config, 0)?;
    let entries = read_dump::<F>(&dir.join(PARAMS_BIN), &dir.join(PARAMS_MANIFEST))?;
    let mut seen = BTreeSet::new();
    for e in entries {
        let Some(p) = model.params.by_name_mut(&e.name) else {
            return Err(CheckpointError::Mismatch(format!("unexpected tensor {}", e.name)));
        };
        if p.value.shape() != e.tensor.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{} has shape {:?} in the checkpoint but {:?} in the model",
                e.name,
                e.tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = e.tensor;
        seen.insert(e.name);
    }
    let missing: Vec<String> = model
        .params
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| !seen.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::Mismatch(format!("missing tensors: {}", missing.join(", "))));
    }
    Ok(model)
}
