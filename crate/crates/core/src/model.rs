//! The assembled generator: content encoder, dual-head style encoder,
//! projection heads, and the mixture decoder, trained with the four-term
//! objective `L = L_wri + L_gly + L_pre + lambda * L_cls`.

use crate::autodiff::{Scalar, Var};
use crate::contrastive::{
    glyph_nce, pool_tokens, ContrastiveConfig, ContrastiveError, GlyphSets, ProjectionHead,
    draw_glyph_sets, writer_nce,
};
use crate::decoder::{pen_state_losses, Decoder, DecoderConfig, DecoderError};
use crate::encoders::{ContentEncoder, EncoderConfig, StyleEncoder};
use crate::nn::{ParamStore, Session};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("batch shape mismatch: {0}")]
    BatchShape(String),
}

/// Everything needed to rebuild a model with identical weights layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub contrastive: ContrastiveConfig,
    /// Style references per sample (`K`).
    pub style_refs: usize,
    pub n_classes: usize,
    /// Ablation switches: a disabled term contributes exactly zero.
    pub enable_writer_loss: bool,
    pub enable_glyph_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            style_refs: 4,
            n_classes: 40,
            enable_writer_loss: true,
            enable_glyph_loss: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.contrastive.validate()?;
        if self.encoder.c != self.decoder.c {
            return Err("encoder and decoder channel widths must match".into());
        }
        if self.style_refs < 1 {
            return Err("need at least one style reference".into());
        }
        Ok(())
    }
}

/// One training batch, already tensorized.
pub struct TrainBatch<F: Scalar> {
    /// `(B, 1, H, W)` content images.
    pub content: ArrayD<F>,
    /// `(B * K, 1, H, W)` style reference images, item-major.
    pub style: ArrayD<F>,
    /// Writer index per batch item, `B` entries.
    pub writers: Vec<usize>,
    /// `(B, T, 5)` padded target rows.
    pub targets: ArrayD<F>,
    /// Real (unpadded) length per item.
    pub real_lens: Vec<usize>,
}

/// Tape handles for the loss terms of one step.
pub struct LossVars {
    pub total: Var,
    pub writer: Var,
    pub glyph: Var,
    pub pen: Var,
    pub state: Var,
}

/// Loss values for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub writer: f64,
    pub glyph: f64,
    pub pen: f64,
    pub state: f64,
}

impl LossVars {
    pub fn values<F: Scalar>(&self, s: &Session<F>) -> LossValues {
        let read = |v: Var| s.tape.value(v)[[]].to_f64();
        LossValues {
            total: read(self.total),
            writer: read(self.writer),
            glyph: read(self.glyph),
            pen: read(self.pen),
            state: read(self.state),
        }
    }
}

/// The full generator.
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub content: ContentEncoder,
    pub style: StyleEncoder,
    pub f1: ProjectionHead,
    pub f2: ProjectionHead,
    pub decoder: Decoder,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model configuration");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let content = ContentEncoder::new(&mut ps, "content", &cfg.encoder, cfg.n_classes, &mut rng);
        let style = StyleEncoder::new(&mut ps, "style", &cfg.encoder, &mut rng);
        let f1 = ProjectionHead::new(&mut ps, "proj_writer", cfg.encoder.c, &mut rng);
        let f2 = ProjectionHead::new(&mut ps, "proj_glyph", cfg.encoder.c, &mut rng);
        let decoder = Decoder::new(&mut ps, "decoder", &cfg.decoder, &mut rng);
        Model {
            cfg,
            params: ps,
            content,
            style,
            f1,
            f2,
            decoder,
        }
    }

    /// Build the four-term objective on a fresh session. `step_seed` fixes
    /// the glyph patch draws, making the whole step a pure function of
    /// `(weights, batch, step_seed)`.
    pub fn batch_losses(
        &self,
        batch: &TrainBatch<F>,
        step_seed: u64,
    ) -> Result<(Session<F>, LossVars), ModelError> {
        let b = batch.writers.len();
        let k = self.cfg.style_refs;
        if batch.style.shape()[0] != b * k {
            return Err(ModelError::BatchShape(format!(
                "expected {} style images, got {}",
                b * k,
                batch.style.shape()[0]
            )));
        }
        if batch.real_lens.len() != b || batch.targets.shape()[0] != b {
            return Err(ModelError::BatchShape("target/batch size mismatch".into()));
        }

        let mut s = Session::new(&self.params);
        let d = self.cfg.encoder.token_count();
        let c = self.cfg.encoder.c;

        let content_v = s.tape.constant(batch.content.clone());
        let style_v = s.tape.constant(batch.style.clone());
        let targets_v = s.tape.constant(batch.targets.clone());

        let q = self.content.encode(&mut s, content_v);
        let feats = self.style.encode(&mut s, style_v);

        // writer-wise objective over all B*K reference features
        let writer = if self.cfg.enable_writer_loss {
            let pooled = pool_tokens(&mut s, feats.writer);
            let z = self.f1.apply(&mut s, pooled);
            let ids: Vec<usize> = batch
                .writers
                .iter()
                .flat_map(|&w| std::iter::repeat_n(w, k))
                .collect();
            writer_nce(&mut s, z, &ids, self.cfg.contrastive.tau)?
        } else {
            s.tape.constant(s_constant_scalar())
        };

        // character-wise objective, anchors are the same B*K features
        let glyph = if self.cfg.enable_glyph_loss {
            let mut rng = ChaCha12Rng::seed_from_u64(step_seed);
            rng.set_stream(0x61);
            let sets: GlyphSets = draw_glyph_sets(b * k, d, self.cfg.contrastive.alpha, &mut rng);
            glyph_nce(&mut s, feats.glyph, &self.f2, &self.cfg.contrastive, &sets)
        } else {
            s.tape.constant(s_constant_scalar())
        };

        let e_tokens = s.tape.reshape(feats.writer, &[b, k * d, c]);
        let g_tokens = s.tape.reshape(feats.glyph, &[b, k * d, c]);
        let outputs = self
            .decoder
            .decode(&mut s, q, e_tokens, g_tokens, targets_v)?;
        let (pen, state) = pen_state_losses(
            &mut s,
            outputs,
            &batch.targets,
            &batch.real_lens,
            self.cfg.decoder.mixtures,
        );

        let mut total = s.tape.add(writer, glyph);
        total = s.tape.add(total, pen);
        let weighted_state = s.tape.scale(state, F::from_f64(self.cfg.decoder.lambda));
        total = s.tape.add(total, weighted_state);

        Ok((
            s,
            LossVars {
                total,
                writer,
                glyph,
                pen,
                state,
            },
        ))
    }

    /// Pretraining objective: cross-entropy of the content classifier.
    /// Returns the loss and the logits var.
    pub fn content_class_loss(
        &self,
        images: &ArrayD<F>,
        labels: &[usize],
    ) -> (Session<F>, Var, Var) {
        let mut s = Session::new(&self.params);
        let v = s.tape.constant(images.clone());
        let q = self.content.encode(&mut s, v);
        let logits = self.content.class_logits(&mut s, q);
        let n = labels.len();
        let n_classes = self.cfg.n_classes;
        let mut onehot = ArrayD::<F>::zeros(IxDyn(&[n, n_classes]));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = F::one();
        }
        let log_probs = s.tape.log_softmax_last(logits);
        let oh = s.tape.constant(onehot);
        let picked = s.tape.mul(oh, log_probs);
        let summed = s.tape.sum_all(picked);
        let loss = s.tape.scale(summed, F::from_f64(-1.0 / n as f64));
        (s, loss, logits)
    }

    /// Value-level content classification (no gradients).
    pub fn classify_content(&self, images: &ArrayD<F>) -> Vec<usize> {
        let mut s = Session::new(&self.params);
        let v = s.tape.constant(images.clone());
        let q = self.content.encode(&mut s, v);
        let logits = self.content.class_logits(&mut s, q);
        let vals = s.tape.value(logits);
        let n = images.shape()[0];
        (0..n)
            .map(|i| {
                (0..self.cfg.n_classes)
                    .max_by(|&a, &b| {
                        vals[[i, a]]
                            .partial_cmp(&vals[[i, b]])
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap()
            })
            .collect()
    }

    /// Value-level style features of `(N, 1, H, W)` reference images:
    /// `(E, G)` arrays of shape `(N, d, c)`.
    pub fn style_feature_arrays(&self, images: &ArrayD<F>) -> (ArrayD<F>, ArrayD<F>) {
        let mut s = Session::new(&self.params);
        let v = s.tape.constant(images.clone());
        let feats = self.style.encode(&mut s, v);
        (
            s.tape.value(feats.writer).clone(),
            s.tape.value(feats.glyph).clone(),
        )
    }

    /// Value-level content tokens `q` of `(N, 1, H, W)` images: `(N, d, c)`.
    pub fn content_token_arrays(&self, images: &ArrayD<F>) -> ArrayD<F> {
        let mut s = Session::new(&self.params);
        let v = s.tape.constant(images.clone());
        let q = self.content.encode(&mut s, v);
        s.tape.value(q).clone()
    }
}

fn s_constant_scalar<F: Scalar>() -> ArrayD<F> {
    ArrayD::zeros(IxDyn(&[]))
}
