//! Stylized generation: content label plus a writer's reference set in,
//! characters and a contact sheet out.

use super::load_model;
use crate::config::RunConfig;
use crate::data::{BatchSampler, Dataset, Sample};
use crate::grid::save_grid;
use scrawl_core::model::Model;
use scrawl_core::sampler::{generate, SampleMode, SamplerConfig};
use scrawl_core::trajectory::{
    render_offline, to_absolute, write_dataset, CharacterRecord, OnlineCharacter, Raster,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub characters: usize,
    pub jsonl: PathBuf,
    pub grid: PathBuf,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

pub const GRID_COLS: usize = 8;

/// Look a writer up in the test split first, then in train.
fn writer_samples<'d>(ds: &'d Dataset, writer: &str) -> anyhow::Result<&'d [Sample]> {
    if ds.test.by_writer.contains_key(writer) {
        Ok(ds.test.samples_of(writer))
    } else if ds.train.by_writer.contains_key(writer) {
        Ok(ds.train.samples_of(writer))
    } else {
        anyhow::bail!("unknown writer {writer}")
    }
}

/// Generate one character with references drawn by the caller.
pub fn generate_one(
    model: &Model<f32>,
    ds: &Dataset,
    label_idx: usize,
    refs: &[&Sample],
    mode: SampleMode,
    seed: u64,
) -> OnlineCharacter {
    let content = ds.content_tensor(label_idx);
    let style = ds.style_tensor(refs);
    let sampler_cfg = SamplerConfig {
        max_len: model.cfg.decoder.n_max,
        mode,
        seed,
    };
    generate(model, &content, &style, &sampler_cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    label: &str,
    writer: &str,
    n: usize,
    mode: SampleMode,
    out_dir: &Path,
) -> anyhow::Result<GenerateSummary> {
    cfg.install_threads();
    anyhow::ensure!(n >= 1, "need at least one character");
    let ds = Dataset::load(&cfg.data_dir, cfg.encoder.image_size, cfg.decoder.n_max)?;
    let (model, _, _) = load_model::<f32>(checkpoint)?;

    let label_idx = ds
        .manifest
        .glyphs
        .iter()
        .position(|g| g.class_id == label)
        .ok_or_else(|| anyhow::anyhow!("unknown label {label}"))?;
    let samples = writer_samples(&ds, writer)?;
    anyhow::ensure!(
        samples.len() >= cfg.style_refs,
        "writer {writer} has too few samples for {} references",
        cfg.style_refs
    );

    let mut sampler = BatchSampler::new(cfg.seed, cfg.style_refs);
    let ref_idx = sampler.draw_refs(samples.len(), cfg.style_refs, &[]);
    let refs: Vec<&Sample> = ref_idx.iter().map(|&i| &samples[i]).collect();

    let mut records = Vec::with_capacity(n);
    let mut tiles: Vec<Raster> = Vec::with_capacity(n);
    for i in 0..n {
        let ch = generate_one(&model, &ds, label_idx, &refs, mode, cfg.seed.wrapping_add(i as u64));
        tiles.push(render_offline(&ch, cfg.encoder.image_size));
        records.push(CharacterRecord::new(writer, label, to_absolute(&ch)));
    }

    std::fs::create_dir_all(out_dir)?;
    let jsonl = out_dir.join("generated.jsonl");
    write_dataset(&records, &jsonl)?;
    let grid = out_dir.join("generated.png");
    save_grid(&tiles, GRID_COLS.min(n), &grid)?;
    let (rows, cols) = crate::grid::grid_dims(n, GRID_COLS.min(n));
    Ok(GenerateSummary {
        characters: n,
        jsonl,
        grid,
        grid_rows: rows,
        grid_cols: cols,
    })
}
