//! Content encoder and dual-head style encoder.
//!
//! Both share the same recipe: a strided conv backbone turns a grayscale
//! glyph image into an `h x w x c` feature map, the spatial cells become
//! `d = h*w` tokens, sinusoidal positions are added, and a small
//! transformer encoder mixes them. The style encoder then forks into a
//! writer head and a glyph head, giving per-reference feature sequences
//! `E` and `G`; the content encoder yields the token sequence `q`.
//!
//! Every reference image is processed independently: attention only mixes
//! tokens belonging to the same image, so feature `i` cannot depend on
//! reference `j != i`.

use crate::autodiff::{Scalar, Var};
use crate::nn::{add_positions, Block, ConvLayer, LayerNorm, Linear, ParamStore, Session};
use crate::trajectory::Raster;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture of one encoder branch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Input images are `image_size x image_size` grayscale.
    pub image_size: usize,
    /// Token/channel width.
    pub c: usize,
    pub heads: usize,
    /// Self-attention layers in the shared trunk.
    pub enc_layers: usize,
    /// Self-attention layers in each style head.
    pub head_layers: usize,
    pub ffn_mult: usize,
    /// Output channels per conv stage; each stage downsamples by 2. The
    /// last entry must equal `c`.
    pub conv_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            c: 128,
            heads: 4,
            enc_layers: 2,
            head_layers: 1,
            ffn_mult: 2,
            conv_channels: vec![16, 32, 64, 96, 128],
        }
    }
}

impl EncoderConfig {
    /// Side length of the feature map after all conv stages.
    pub fn feature_grid(&self) -> usize {
        self.image_size >> self.conv_channels.len()
    }

    /// Token count `d = h * w`.
    pub fn token_count(&self) -> usize {
        let g = self.feature_grid();
        g * g
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.c % self.heads != 0 {
            return Err(format!("c={} not divisible by heads={}", self.c, self.heads));
        }
        if *self.conv_channels.last().unwrap_or(&0) != self.c {
            return Err("last conv channel must equal c".into());
        }
        if self.image_size % (1 << self.conv_channels.len()) != 0 || self.feature_grid() == 0 {
            return Err(format!(
                "image size {} incompatible with {} conv stages",
                self.image_size,
                self.conv_channels.len()
            ));
        }
        Ok(())
    }
}

/// Strided conv stack: grayscale image to `(B, c, h, w)` feature map.
pub struct ConvBackbone {
    pub layers: Vec<ConvLayer>,
    pub cfg: EncoderConfig,
}

impl ConvBackbone {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            layers.push(ConvLayer::new(
                ps,
                &format!("{name}.conv{i}"),
                cin,
                cout,
                3,
                2,
                rng,
            ));
            cin = cout;
        }
        ConvBackbone {
            layers,
            cfg: cfg.clone(),
        }
    }

    /// `(B, 1, H, W) -> (B, c, h, w)` feature map.
    pub fn feature_map<F: Scalar>(&self, s: &mut Session<F>, images: Var) -> Var {
        let shape = s.tape.value(images).shape().to_vec();
        assert_eq!(
            (shape[2], shape[3]),
            (self.cfg.image_size, self.cfg.image_size),
            "backbone expects {0}x{0} input images",
            self.cfg.image_size
        );
        let mut x = images;
        for layer in &self.layers {
            x = layer.apply(s, x);
        }
        x
    }

    /// `(B, 1, H, W) -> (B, d, c)` token sequence.
    pub fn tokens<F: Scalar>(&self, s: &mut Session<F>, images: Var) -> Var {
        let fm = self.feature_map(s, images);
        let shape = s.tape.value(fm).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let t = s.tape.permute(fm, &[0, 2, 3, 1]);
        s.tape.reshape(t, &[b, h * w, c])
    }
}

/// Writer-wise features `E` and character-wise features `G` of one batch
/// of style references, both `(N, d, c)` with `N` reference images.
pub struct StyleFeatures {
    pub writer: Var,
    pub glyph: Var,
}

/// Dual-head style encoder: backbone, shared trunk, writer head, glyph head.
pub struct StyleEncoder {
    pub backbone: ConvBackbone,
    pub trunk: Vec<Block>,
    pub trunk_norm: LayerNorm,
    pub writer_head: Vec<Block>,
    pub writer_norm: LayerNorm,
    pub glyph_head: Vec<Block>,
    pub glyph_norm: LayerNorm,
}

impl StyleEncoder {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let backbone = ConvBackbone::new(ps, &format!("{name}.backbone"), cfg, rng);
        let mk_stack = |ps: &mut ParamStore<F>, stack: &str, n: usize, rng: &mut R| {
            (0..n)
                .map(|i| {
                    Block::new(
                        ps,
                        &format!("{name}.{stack}{i}"),
                        cfg.c,
                        cfg.heads,
                        cfg.ffn_mult,
                        false,
                        rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        let trunk = mk_stack(ps, "trunk", cfg.enc_layers, rng);
        let trunk_norm = LayerNorm::new(ps, &format!("{name}.trunk_norm"), cfg.c);
        let writer_head = mk_stack(ps, "writer", cfg.head_layers, rng);
        let writer_norm = LayerNorm::new(ps, &format!("{name}.writer_norm"), cfg.c);
        let glyph_head = mk_stack(ps, "glyph", cfg.head_layers, rng);
        let glyph_norm = LayerNorm::new(ps, &format!("{name}.glyph_norm"), cfg.c);
        StyleEncoder {
            backbone,
            trunk,
            trunk_norm,
            writer_head,
            writer_norm,
            glyph_head,
            glyph_norm,
        }
    }

    /// Encode `(N, 1, H, W)` reference images into `E` and `G`, `(N, d, c)`.
    pub fn encode<F: Scalar>(&self, s: &mut Session<F>, images: Var) -> StyleFeatures {
        let tokens = self.backbone.tokens(s, images);
        let mut z = add_positions(s, tokens);
        for block in &self.trunk {
            z = block.apply(s, z, None, false);
        }
        let z = self.trunk_norm.apply(s, z);

        let mut e = z;
        for block in &self.writer_head {
            e = block.apply(s, e, None, false);
        }
        let e = self.writer_norm.apply(s, e);

        let mut g = z;
        for block in &self.glyph_head {
            g = block.apply(s, g, None, false);
        }
        let g = self.glyph_norm.apply(s, g);

        StyleFeatures { writer: e, glyph: g }
    }
}

/// Content branch: backbone + trunk producing `q`, plus a classification
/// head used only during pretraining.
pub struct ContentEncoder {
    pub backbone: ConvBackbone,
    pub trunk: Vec<Block>,
    pub trunk_norm: LayerNorm,
    pub classifier: Linear,
}

impl ContentEncoder {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let backbone = ConvBackbone::new(ps, &format!("{name}.backbone"), cfg, rng);
        let trunk = (0..cfg.enc_layers)
            .map(|i| {
                Block::new(
                    ps,
                    &format!("{name}.trunk{i}"),
                    cfg.c,
                    cfg.heads,
                    cfg.ffn_mult,
                    false,
                    rng,
                )
            })
            .collect();
        let trunk_norm = LayerNorm::new(ps, &format!("{name}.trunk_norm"), cfg.c);
        let classifier = Linear::new(ps, &format!("{name}.classifier"), cfg.c, n_classes, rng);
        ContentEncoder {
            backbone,
            trunk,
            trunk_norm,
            classifier,
        }
    }

    /// `(B, 1, H, W) -> q: (B, d, c)`.
    pub fn encode<F: Scalar>(&self, s: &mut Session<F>, images: Var) -> Var {
        let tokens = self.backbone.tokens(s, images);
        let mut q = add_positions(s, tokens);
        for block in &self.trunk {
            q = block.apply(s, q, None, false);
        }
        self.trunk_norm.apply(s, q)
    }

    /// Class logits from `q`: mean over tokens, then the linear head.
    pub fn class_logits<F: Scalar>(&self, s: &mut Session<F>, q: Var) -> Var {
        let pooled = s.tape.mean_axis(q, 1);
        self.classifier.apply(s, pooled)
    }
}

/// Stack rasters into a `(N, 1, H, W)` model input in `[0, 1]`.
pub fn rasters_to_array<F: Scalar>(images: &[&Raster]) -> ArrayD<F> {
    assert!(!images.is_empty());
    let size = images[0].size;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[images.len(), 1, size, size]));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.size, size);
        for y in 0..size {
            for x in 0..size {
                out[[i, 0, y, x]] = F::from_f64(img.get(x, y) as f64 / 255.0);
            }
        }
    }
    out
}
