//! Stage one: train the content encoder on character classification over
//! rendered training samples.

use super::{save_checkpoint, step_seed};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::logging::JsonlLogger;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use scrawl_core::encoders::rasters_to_array;
use scrawl_core::eval::accuracy;
use scrawl_core::model::Model;
use scrawl_core::optim::Adam;
use scrawl_core::trajectory::Raster;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Debug, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub train_accuracy: f64,
    pub checkpoint: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Serialize)]
struct PretrainLogRow {
    step: usize,
    loss: f64,
}

/// Train the content branch; everything else keeps its initialization.
pub fn pretrain_content(cfg: &RunConfig) -> anyhow::Result<PretrainSummary> {
    cfg.install_threads();
    let ds = Dataset::load(&cfg.data_dir, cfg.encoder.image_size, cfg.decoder.n_max)?;
    let model = Model::<f32>::new(cfg.model_config(), cfg.seed);
    let mut params_owner = model; // mutated through Adam below
    let mut adam = Adam::new(&params_owner.params, cfg.pretrain.lr);
    let mut logger = JsonlLogger::create(&cfg.out_dir.join("pretrain_log.jsonl"))?;

    // flat sample index over the train split
    let all: Vec<(usize, &crate::data::Sample)> = ds
        .train
        .writers
        .iter()
        .flat_map(|w| ds.train.samples_of(w).iter())
        .enumerate()
        .map(|(i, s)| (i, s))
        .collect();
    anyhow::ensure!(!all.is_empty(), "prepared training split is empty");

    let mut rng = ChaCha12Rng::seed_from_u64(step_seed(cfg.seed, 0x70));
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.pretrain.steps {
        let mut images: Vec<Raster> = Vec::with_capacity(cfg.pretrain.batch);
        let mut labels = Vec::with_capacity(cfg.pretrain.batch);
        for _ in 0..cfg.pretrain.batch {
            let (_, sample) = all[rng.random_range(0..all.len())];
            images.push(ds.render_sample(sample));
            labels.push(sample.label_idx);
        }
        let refs: Vec<&Raster> = images.iter().collect();
        let tensor = rasters_to_array::<f32>(&refs);
        let (s, loss, _) = params_owner.content_class_loss(&tensor, &labels);
        let value = s.tape.value(loss)[[]] as f64;
        anyhow::ensure!(value.is_finite(), "pretraining loss became non-finite");
        if step == 0 {
            first_loss = value;
        }
        last_loss = value;
        let grads = s.tape.backward(loss);
        adam.apply(&mut params_owner.params, &s, &grads, cfg.pretrain.clip);
        if step % cfg.pretrain.log_every == 0 || step + 1 == cfg.pretrain.steps {
            logger.log(&PretrainLogRow { step, loss: value })?;
        }
    }

    // training accuracy on a fixed seeded subset
    let mut probe_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xacc);
    let probe: Vec<&crate::data::Sample> = (0..800.min(all.len()))
        .map(|_| all[probe_rng.random_range(0..all.len())].1)
        .collect();
    let mut hits = Vec::new();
    let mut expected = Vec::new();
    for chunk in probe.chunks(64) {
        let rasters: Vec<Raster> = chunk.iter().map(|s| ds.render_sample(s)).collect();
        let refs: Vec<&Raster> = rasters.iter().collect();
        let tensor = rasters_to_array::<f32>(&refs);
        hits.extend(params_owner.classify_content(&tensor));
        expected.extend(chunk.iter().map(|s| s.label_idx));
    }
    let train_accuracy = accuracy(&hits, &expected);

    let ckpt = cfg.out_dir.join("content.ckpt");
    save_checkpoint(&params_owner, "content-pretrain", cfg.pretrain.steps as u64, vec![], &ckpt)?;
    let summary = PretrainSummary {
        steps: cfg.pretrain.steps,
        train_accuracy,
        checkpoint: ckpt,
        first_loss,
        final_loss: last_loss,
    };
    std::fs::write(
        cfg.out_dir.join("pretrain_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
