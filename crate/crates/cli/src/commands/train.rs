//! Stage two: train the whole model with the four-term objective, starting
//! from the pretrained content encoder.

use super::{load_model, save_checkpoint, step_seed, sidecar_path};
use crate::config::RunConfig;
use crate::data::{BatchSampler, Dataset};
use crate::logging::JsonlLogger;
use ndarray::{ArrayD, IxDyn};
use scrawl_core::checkpoint::{load_params, Archive};
use scrawl_core::model::{LossValues, Model};
use scrawl_core::optim::Adam;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_losses: LossValues,
    pub checkpoint: PathBuf,
}

/// Loss-log row; field names are part of the log-file interface.
#[derive(Serialize)]
struct LossLogRow {
    step: u64,
    #[serde(rename = "L_wri")]
    l_wri: f64,
    #[serde(rename = "L_gly")]
    l_gly: f64,
    #[serde(rename = "L_pre")]
    l_pre: f64,
    #[serde(rename = "L_cls")]
    l_cls: f64,
    total: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct NanDiagnostic {
    step: u64,
    writers: Vec<usize>,
    losses: LossValues,
}

fn optimizer_entries(model: &Model<f32>, adam: &Adam<f32>) -> Vec<(String, ArrayD<f32>)> {
    let (step, m, v) = adam.state();
    let mut extra = vec![(
        "opt.step".to_string(),
        ArrayD::from_elem(IxDyn(&[1]), step as f32),
    )];
    for (i, (name, _)) in model.params.iter().enumerate() {
        extra.push((format!("opt.m.{name}"), m[i].clone()));
        extra.push((format!("opt.v.{name}"), v[i].clone()));
    }
    extra
}

fn restore_optimizer(
    model: &Model<f32>,
    adam: &mut Adam<f32>,
    archive: &Archive<f32>,
) -> anyhow::Result<()> {
    let step = archive
        .get("opt.step")
        .map(|a| a[[0]] as u64)
        .ok_or_else(|| anyhow::anyhow!("checkpoint has no optimizer state to resume from"))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in model.params.iter() {
        m.push(
            archive
                .get(&format!("opt.m.{name}"))
                .ok_or_else(|| anyhow::anyhow!("missing optimizer moment for {name}"))?
                .clone(),
        );
        v.push(
            archive
                .get(&format!("opt.v.{name}"))
                .ok_or_else(|| anyhow::anyhow!("missing optimizer moment for {name}"))?
                .clone(),
        );
    }
    adam.restore(step, m, v);
    Ok(())
}

/// Train the full model. `resume` continues from a previous full
/// checkpoint (weights, optimizer moments, step counter); otherwise the
/// content encoder weights come from `content.ckpt` in the output
/// directory and training starts at step zero.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<TrainSummary> {
    cfg.install_threads();
    let ds = Dataset::load(&cfg.data_dir, cfg.encoder.image_size, cfg.decoder.n_max)?;
    let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.optim.lr);
    let mut start_step: u64 = 0;

    match resume {
        Some(path) => {
            let (_, meta, archive) = load_model::<f32>(path)?;
            anyhow::ensure!(
                meta.model == model.cfg,
                "resume checkpoint was trained with a different model configuration"
            );
            load_params(&mut model.params, &archive)?;
            restore_optimizer(&model, &mut adam, &archive)?;
            start_step = meta.steps;
        }
        None => {
            let content = cfg.out_dir.join("content.ckpt");
            anyhow::ensure!(
                content.exists() && sidecar_path(&content).exists(),
                "content checkpoint {} not found; run pretrain-content first",
                content.display()
            );
            let archive = Archive::<f32>::load(&content)?;
            load_params(&mut model.params, &archive)?;
        }
    }

    let mut sampler = BatchSampler::new(cfg.seed, cfg.style_refs);
    let mut logger = JsonlLogger::create(&cfg.out_dir.join("train_log.jsonl"))?;
    let mut last = LossValues {
        total: f64::NAN,
        writer: f64::NAN,
        glyph: f64::NAN,
        pen: f64::NAN,
        state: f64::NAN,
    };

    let end_step = start_step + cfg.optim.steps as u64;
    for step in start_step..end_step {
        let batch = sampler.next_batch(&ds, cfg.optim.batch);
        let (s, loss_vars) = model.batch_losses(&batch, step_seed(cfg.seed, step))?;
        let values = loss_vars.values(&s);
        if !values.total.is_finite() {
            let diag = NanDiagnostic {
                step,
                writers: batch.writers.clone(),
                losses: values,
            };
            let path = cfg.out_dir.join("nan_diagnostic.json");
            std::fs::write(&path, serde_json::to_string_pretty(&diag)?)?;
            anyhow::bail!(
                "loss became non-finite at step {step}; batch dumped to {}",
                path.display()
            );
        }
        let grads = s.tape.backward(loss_vars.total);
        let grad_norm = adam.apply(&mut model.params, &s, &grads, cfg.optim.clip);
        last = values;

        if step % cfg.optim.log_every as u64 == 0 || step + 1 == end_step {
            logger.log(&LossLogRow {
                step,
                l_wri: values.writer,
                l_gly: values.glyph,
                l_pre: values.pen,
                l_cls: values.state,
                total: values.total,
                grad_norm,
            })?;
        }
        if cfg.optim.checkpoint_every > 0
            && step > start_step
            && step % cfg.optim.checkpoint_every as u64 == 0
        {
            save_checkpoint(
                &model,
                "full",
                step,
                optimizer_entries(&model, &adam),
                &cfg.out_dir.join("model.ckpt"),
            )?;
        }
    }

    let ckpt = cfg.out_dir.join("model.ckpt");
    save_checkpoint(
        &model,
        "full",
        end_step,
        optimizer_entries(&model, &adam),
        &ckpt,
    )?;
    let summary = TrainSummary {
        steps: end_step,
        final_losses: last,
        checkpoint: ckpt,
    };
    std::fs::write(
        cfg.out_dir.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
