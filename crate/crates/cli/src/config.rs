//! Run configuration: one TOML file drives every subcommand. Any omitted
//! field falls back to the desk-scale default.

use scrawl_core::contrastive::ContrastiveConfig;
use scrawl_core::corpus::CorpusParams;
use scrawl_core::decoder::DecoderConfig;
use scrawl_core::encoders::EncoderConfig;
use scrawl_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSection {
    pub lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 2e-4,
            clip: 5.0,
            batch: 16,
            steps: 2500,
            log_every: 25,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lr: 1e-3,
            clip: 5.0,
            batch: 32,
            steps: 700,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Content classes generated per test writer for scoring.
    pub classes_per_writer: usize,
    /// Characters per writer in each consistency-matrix group.
    pub matrix_chars: usize,
    /// Real reference sets per writer when training the writer identifier.
    pub identifier_sets_per_writer: usize,
    /// Reference images per sample fed to the spectrum analysis.
    pub spectrum_samples: usize,
    pub recognizer_epochs: usize,
    pub identifier_epochs: usize,
    pub classifier_hidden: usize,
    /// greedy or stochastic generation during evaluation.
    pub mode: scrawl_core::sampler::SampleMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            classes_per_writer: 24,
            matrix_chars: 16,
            identifier_sets_per_writer: 80,
            spectrum_samples: 40,
            recognizer_epochs: 6,
            identifier_epochs: 14,
            classifier_hidden: 48,
            mode: scrawl_core::sampler::SampleMode::Greedy,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Redundant-point tolerance, applied in source units before
    /// normalization.
    pub rdp_epsilon: f64,
    pub corpus: CorpusParams,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub contrastive: ContrastiveConfig,
    /// Style references per sample (`K`).
    pub style_refs: usize,
    pub optim: OptimSection,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    /// Ablation switches for the contrastive terms.
    pub enable_writer_loss: bool,
    pub enable_glyph_loss: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0, // 0 = rayon default
            data_dir: PathBuf::from("data/desk"),
            out_dir: PathBuf::from("runs/desk"),
            rdp_epsilon: 2.0,
            corpus: CorpusParams::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            style_refs: 4,
            optim: OptimSection::default(),
            pretrain: PretrainSection::default(),
            eval: EvalSection::default(),
            enable_writer_loss: true,
            enable_glyph_loss: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid model configuration: {e}"))?;
        if self.corpus.n_classes < 2 || self.corpus.n_writers < 4 {
            anyhow::bail!("corpus needs at least 2 classes and 4 writers");
        }
        if self.optim.batch < 4 || self.optim.batch % 2 != 0 {
            anyhow::bail!("training batch must be even and at least 4");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            contrastive: self.contrastive,
            style_refs: self.style_refs,
            n_classes: self.corpus.n_classes,
            enable_writer_loss: self.enable_writer_loss,
            enable_glyph_loss: self.enable_glyph_loss,
        }
    }

    /// Install the configured rayon pool. Safe to call repeatedly; only the
    /// first call in a process wins, which is fine because chunked kernels
    /// are thread-count invariant.
    pub fn install_threads(&self) {
        if self.threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build_global();
        }
    }
}
