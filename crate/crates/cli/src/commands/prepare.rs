//! Corpus generation plus preprocessing: simplify, normalize, length-check,
//! write the dataset files.

use crate::config::RunConfig;
use scrawl_core::corpus::{build_corpus, Corpus};
use scrawl_core::trajectory::{
    normalize_character, rdp_simplify, to_offsets, write_dataset, CharacterRecord,
};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Debug, Serialize)]
pub struct PrepareSummary {
    pub train_records: usize,
    pub test_records: usize,
    pub dropped: usize,
    pub data_dir: PathBuf,
}

fn preprocess(
    records: &[CharacterRecord],
    epsilon: f64,
    n_max: usize,
    dropped: &mut usize,
) -> anyhow::Result<Vec<CharacterRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let simplified = CharacterRecord::new(
            rec.writer_id.clone(),
            rec.label.clone(),
            rec.strokes.iter().map(|s| rdp_simplify(s, epsilon)).collect(),
        );
        let (normalized, _) = normalize_character(&simplified)?;
        let online = to_offsets(&normalized)?;
        if online.len() > n_max {
            *dropped += 1;
            continue;
        }
        debug_assert!(online.check_invariants());
        out.push(normalized);
    }
    Ok(out)
}

/// Build the synthetic corpus, run the preprocessing chain on every record
/// (redundant-point removal in source units, then normalization), drop
/// characters longer than the decoder cap, and write
/// `train.jsonl` / `test.jsonl` / `manifest.json`.
pub fn prepare_data(cfg: &RunConfig) -> anyhow::Result<PrepareSummary> {
    let corpus: Corpus = build_corpus(&cfg.corpus);
    let mut dropped = 0usize;
    let train = preprocess(&corpus.train, cfg.rdp_epsilon, cfg.decoder.n_max, &mut dropped)?;
    let test = preprocess(&corpus.test, cfg.rdp_epsilon, cfg.decoder.n_max, &mut dropped)?;

    std::fs::create_dir_all(&cfg.data_dir)?;
    write_dataset(&train, &cfg.data_dir.join("train.jsonl"))?;
    write_dataset(&test, &cfg.data_dir.join("test.jsonl"))?;
    let manifest = serde_json::to_string_pretty(&corpus.manifest)?;
    std::fs::write(cfg.data_dir.join("manifest.json"), manifest)?;

    Ok(PrepareSummary {
        train_records: train.len(),
        test_records: test.len(),
        dropped,
        data_dir: cfg.data_dir.clone(),
    })
}
