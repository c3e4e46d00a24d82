//! Checkpoint directories: a JSON manifest plus one `.ten` payload per
//! parameter.
//!
//! Layout:
//! ```text
//! <ckpt>/manifest.json
//! <ckpt>/params/p000.ten, p001.ten, ...
//! ```
//! The manifest records parameter names and shapes in order, the training
//! phase tag, the model config, and a snapshot of the run config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DenoiserParams, ModelConfig, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("tensor error: {0}")]
    Tensor(String),
    #[error("parameter {name}: stored shape {stored:?} != manifest shape {manifest:?}")]
    ShapeMismatch { name: String, stored: Vec<usize>, manifest: Vec<usize> },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
}

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Training phase that produced this checkpoint (`init`, `audio`,
    /// `skeleton`, `dpo`, ...).
    pub phase: String,
    pub seed: u64,
    pub model_config: ModelConfig,
    /// Conditioning pathway the model was trained with
    /// (`full`, `partial_k2`, or `subsample`).
    #[serde(default = "default_strategy")]
    pub conditioning_strategy: String,
    /// Resolved run-config snapshot at save time.
    pub run_config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn default_strategy() -> String {
    "full".to_string()
}

pub fn save(
    dir: &Path,
    params: &DenoiserParams,
    phase: &str,
    run_config: &serde_json::Value,
) -> Result<(), CheckpointError> {
    save_with_strategy(dir, params, phase, run_config, "full")
}

pub fn save_with_strategy(
    dir: &Path,
    params: &DenoiserParams,
    phase: &str,
    run_config: &serde_json::Value,
    conditioning_strategy: &str,
) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir.join("params"))?;
    let mut entries = Vec::with_capacity(params.params.len());
    for (i, (name, tensor)) in params.params.iter().enumerate() {
        let file = format!("params/p{i:03}.ten");
        tensor
            .write_ten(&dir.join(&file))
            .map_err(|e| CheckpointError::Tensor(e.to_string()))?;
        entries.push(ParamEntry { name: name.to_string(), shape: tensor.shape().to_vec(), file });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        phase: phase.to_string(),
        seed: params.seed,
        model_config: params.config.clone(),
        conditioning_strategy: conditioning_strategy.to_string(),
        run_config: run_config.clone(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(DenoiserParams, CheckpointManifest), CheckpointError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(manifest.format_version));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let tensor = Tensor::read_ten(&dir.join(&entry.file))
            .map_err(|e| CheckpointError::Tensor(e.to_string()))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                stored: tensor.shape().to_vec(),
                manifest: entry.shape.clone(),
            });
        }
        params.push(entry.name.clone(), tensor);
    }
    let denoiser = DenoiserParams {
        config: manifest.model_config.clone(),
        seed: manifest.seed,
        params,
    };
    Ok((denoiser, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture, CondSpec, ModelConfig};
    use crate::motion::Modality;

    fn config() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Transformer,
            n_blocks: 1,
            d: 4,
            n_heads: 1,
            d_ff: 8,
            use_pos_embedding: true,
            latent_shape: [2, 1, 2, 4],
            conditions: vec![CondSpec {
                modality: Modality::Audio,
                tokens_per_step: 2,
                feat_dim: 3,
            }],
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(&config(), 3).unwrap();
        let run_config = serde_json::json!({"bench": {"seed": 1}});
        save(dir.path(), &params, "audio", &run_config).unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.phase, "audio");
        assert_eq!(manifest.run_config, run_config);
        assert_eq!(loaded.params.names(), params.params.names());
        // Values survive up to f32 storage precision.
        for (name, tensor) in params.params.iter() {
            let back = loaded.params.get(name).unwrap();
            assert_eq!(back.shape(), tensor.shape());
            assert!(back.max_abs_diff(tensor) < 1e-6, "param {name}");
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let params = init_params(&config(), 4).unwrap();
        let rc = serde_json::json!({});
        save(dir_a.path(), &params, "init", &rc).unwrap();
        save(dir_b.path(), &params, "init", &rc).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(dir_a.path().join("params/p000.ten")).unwrap();
        let b = std::fs::read(dir_b.path().join("params/p000.ten")).unwrap();
        assert_eq!(a, b);
    }
}
