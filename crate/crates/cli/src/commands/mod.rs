//! Command implementations behind the CLI surface.

pub mod evaluate;
pub mod generate;
pub mod prepare;
pub mod pretrain;
pub mod train;

use scrawl_core::autodiff::Scalar;
use scrawl_core::checkpoint::{load_params, params_to_entries, Archive};
use scrawl_core::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_SCHEMA: &str = "scrawl-checkpoint-v1";

/// JSON sidecar stored next to each weight archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub stage: String,
    pub steps: u64,
    pub model: ModelConfig,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    let mut os = archive.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write a weight archive plus sidecar. `extra` entries (optimizer state)
/// are appended after the parameters.
pub fn save_checkpoint<F: Scalar>(
    model: &Model<F>,
    stage: &str,
    steps: u64,
    extra: Vec<(String, ndarray::ArrayD<F>)>,
    path: &Path,
) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut entries = params_to_entries(&model.params);
    entries.extend(extra);
    Archive { entries }.save(path)?;
    let meta = CheckpointMeta {
        schema: CHECKPOINT_SCHEMA.to_string(),
        stage: stage.to_string(),
        steps,
        model: model.cfg.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Rebuild a model from an archive and its sidecar.
pub fn load_model<F: Scalar>(path: &Path) -> anyhow::Result<(Model<F>, CheckpointMeta, Archive<F>)> {
    let meta_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        anyhow::anyhow!(
            "cannot read checkpoint sidecar {}: {e}",
            sidecar_path(path).display()
        )
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    anyhow::ensure!(
        meta.schema == CHECKPOINT_SCHEMA,
        "unsupported checkpoint schema {}",
        meta.schema
    );
    let archive = Archive::load(path)?;
    let mut model = Model::new(meta.model.clone(), 0);
    load_params(&mut model.params, &archive)?;
    Ok((model, meta, archive))
}

/// Per-step seed stream: decorrelates batches while staying reproducible.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
