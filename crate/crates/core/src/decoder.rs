//! Autoregressive transformer decoder with a Gaussian-mixture pen head.
//!
//! The decoder self-attends causally over the content tokens `q` followed
//! by the embedded previous points, cross-attends the writer-wise features
//! in its first layers and the character-wise features in its last layers,
//! and emits `6R + 3` logits per step: `R` mixture weights, means, log
//! standard deviations and correlation logits for the pen offset, plus 3
//! pen-state logits.
//!
//! Loss conventions: the pen-movement loss is the negative log of the
//! mixture density (floored at 1e-12 before the log) averaged over real
//! steps; the state loss is the negated cross-entropy averaged over every
//! step including padding rows.

use crate::autodiff::{Scalar, Var};
use crate::nn::{add_positions, Block, LayerNorm, Linear, ParamStore, Session};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("mixture density is not finite")]
    NonFiniteDensity,
    #[error("sequence of length {len} exceeds the decoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
}

/// Decoder architecture and loss weighting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Cross-attention layers reading the writer-wise features.
    pub layers_writer: usize,
    /// Cross-attention layers reading the character-wise features.
    pub layers_glyph: usize,
    pub heads: usize,
    pub c: usize,
    pub ffn_mult: usize,
    /// Bivariate mixture components `R`.
    pub mixtures: usize,
    /// Training pad length; also the default generation cap.
    pub n_max: usize,
    /// Weight of the pen-state loss in the total objective.
    pub lambda: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers_writer: 2,
            layers_glyph: 2,
            heads: 4,
            c: 128,
            ffn_mult: 2,
            mixtures: 20,
            n_max: 64,
            lambda: 2.0,
        }
    }
}

impl DecoderConfig {
    /// Logits per step: `6R + 3`.
    pub fn out_dim(&self) -> usize {
        6 * self.mixtures + 3
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mixtures < 1 {
            return Err("need at least one mixture component".into());
        }
        if self.lambda < 0.0 {
            return Err("lambda must be nonnegative".into());
        }
        if self.c % self.heads != 0 {
            return Err("c must divide into heads".into());
        }
        Ok(())
    }
}

// ---- mixture parameters ----------------------------------------------------

/// Per-step mixture parameters in probability space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub rho: Vec<f64>,
    pub pen: [f64; 3],
}

impl GmmParams {
    pub fn check_invariants(&self) -> bool {
        let r = self.pi.len();
        let simplex = (self.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6
            && self.pi.iter().all(|&p| p >= 0.0);
        let pens = (self.pen.iter().sum::<f64>() - 1.0).abs() < 1e-6
            && self.pen.iter().all(|&p| p >= 0.0);
        simplex
            && pens
            && self.mu_x.len() == r
            && self.sigma_x.iter().all(|&s| s > 0.0)
            && self.sigma_y.iter().all(|&s| s > 0.0)
            && self.rho.iter().all(|&r| r.abs() < 1.0)
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Map raw logits to mixture parameters: `pi = softmax`, `mu` raw,
/// `sigma = exp`, `rho = tanh`, `pen = softmax`.
pub fn gmm_from_logits(o: &[f64], r: usize) -> GmmParams {
    assert_eq!(o.len(), 6 * r + 3, "logit vector must have 6R+3 entries");
    let pi = softmax_slice(&o[..r]);
    let mu_x = o[r..2 * r].to_vec();
    let mu_y = o[2 * r..3 * r].to_vec();
    let sigma_x = o[3 * r..4 * r].iter().map(|&v| v.exp()).collect();
    let sigma_y = o[4 * r..5 * r].iter().map(|&v| v.exp()).collect();
    let rho = o[5 * r..6 * r].iter().map(|&v| v.tanh()).collect();
    let pen_probs = softmax_slice(&o[6 * r..]);
    GmmParams {
        pi,
        mu_x,
        mu_y,
        sigma_x,
        sigma_y,
        rho,
        pen: [pen_probs[0], pen_probs[1], pen_probs[2]],
    }
}

/// Bivariate normal density, the direct textbook formula.
pub fn bivariate_density(du: f64, dv: f64, mu_x: f64, mu_y: f64, sx: f64, sy: f64, rho: f64) -> f64 {
    let zx = (du - mu_x) / sx;
    let zy = (dv - mu_y) / sy;
    let om = 1.0 - rho * rho;
    let q = zx * zx - 2.0 * rho * zx * zy + zy * zy;
    (-q / (2.0 * om)).exp() / (2.0 * std::f64::consts::PI * sx * sy * om.sqrt())
}

/// Density floor applied before the log in the pen-movement loss.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Negative log mixture density of the target offset.
pub fn pen_loss(p: &GmmParams, du: f64, dv: f64) -> Result<f64, DecoderError> {
    let mut density = 0.0;
    for i in 0..p.pi.len() {
        density += p.pi[i]
            * bivariate_density(du, dv, p.mu_x[i], p.mu_y[i], p.sigma_x[i], p.sigma_y[i], p.rho[i]);
    }
    if !density.is_finite() {
        return Err(DecoderError::NonFiniteDensity);
    }
    Ok(-(density.max(DENSITY_FLOOR)).ln())
}

/// Negated cross-entropy of the pen state: `-sum_i m_i ln(m_hat_i + 1e-12)`.
pub fn state_loss(pen: &[f64; 3], target: &[f64; 3]) -> f64 {
    -(0..3).map(|i| target[i] * (pen[i] + 1e-12).ln()).sum::<f64>()
}

// ---- decoder stack -----------------------------------------------------------

/// Content- and style-conditioned causal decoder.
pub struct Decoder {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::new(ps, &format!("{name}.embed"), 5, cfg.c, rng);
        let blocks = (0..cfg.layers_writer + cfg.layers_glyph)
            .map(|i| {
                Block::new(
                    ps,
                    &format!("{name}.block{i}"),
                    cfg.c,
                    cfg.heads,
                    cfg.ffn_mult,
                    true,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(ps, &format!("{name}.final_norm"), cfg.c);
        let out = Linear::new(ps, &format!("{name}.out"), cfg.c, cfg.out_dim(), rng);
        Decoder {
            embed,
            blocks,
            final_norm,
            out,
            cfg: cfg.clone(),
        }
    }

    /// Teacher-forced decode. `q: (B, d, c)` content tokens, `e_tokens` and
    /// `g_tokens: (B, Kd, c)` style features, `points: (B, T, 5)` target
    /// rows. Output `(B, T, 6R+3)`; output `t` predicts point `t` and sees
    /// only `q` and points `< t`.
    pub fn decode<F: Scalar>(
        &self,
        s: &mut Session<F>,
        q: Var,
        e_tokens: Var,
        g_tokens: Var,
        points: Var,
    ) -> Result<Var, DecoderError> {
        let pshape = s.tape.value(points).shape().to_vec();
        let (b, t) = (pshape[0], pshape[1]);
        if t > self.cfg.n_max {
            return Err(DecoderError::SequenceTooLong {
                len: t,
                max: self.cfg.n_max,
            });
        }
        let d = s.tape.value(q).shape()[1];

        let seq = if t == 1 {
            q
        } else {
            let prefix = s.tape.narrow(points, 1, 0, t - 1);
            let emb = self.embed.apply(s, prefix);
            s.tape.concat(1, &[q, emb])
        };
        let mut x = add_positions(s, seq);
        for (i, block) in self.blocks.iter().enumerate() {
            let kv = if i < self.cfg.layers_writer {
                e_tokens
            } else {
                g_tokens
            };
            x = block.apply(s, x, Some(kv), true);
        }
        // rows d-1 .. d+t-2 hold the t predictions
        let rows = s.tape.narrow(x, 1, d - 1, t);
        let rows = self.final_norm.apply(s, rows);
        let o = self.out.apply(s, rows);
        debug_assert_eq!(s.tape.value(o).shape(), &[b, t, self.cfg.out_dim()]);
        Ok(o)
    }
}

/// Broadcast one target column `(B, T)` to `(B, T, R)`.
fn broadcast_col<F: Scalar>(targets: &ArrayD<F>, col: usize, r: usize) -> ArrayD<F> {
    let shape = targets.shape();
    let (b, t) = (shape[0], shape[1]);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, t, r]));
    for bi in 0..b {
        for ti in 0..t {
            let v = targets[[bi, ti, col]];
            for ri in 0..r {
                out[[bi, ti, ri]] = v;
            }
        }
    }
    out
}

/// Both decoder losses on the tape.
///
/// Returns `(pen_nll, state_ce)`: the pen loss averaged over real steps
/// (`t < real_lens[b]`), the state loss averaged over all `B*T` steps.
pub fn pen_state_losses<F: Scalar>(
    s: &mut Session<F>,
    outputs: Var,
    targets: &ArrayD<F>,
    real_lens: &[usize],
    r: usize,
) -> (Var, Var) {
    let shape = s.tape.value(outputs).shape().to_vec();
    let (b, t) = (shape[0], shape[1]);
    assert_eq!(shape[2], 6 * r + 3);
    assert_eq!(targets.shape(), &[b, t, 5]);
    assert_eq!(real_lens.len(), b);

    let pi_logits = s.tape.narrow(outputs, 2, 0, r);
    let mu_x = s.tape.narrow(outputs, 2, r, r);
    let mu_y = s.tape.narrow(outputs, 2, 2 * r, r);
    let log_sx = s.tape.narrow(outputs, 2, 3 * r, r);
    let log_sy = s.tape.narrow(outputs, 2, 4 * r, r);
    let rho_raw = s.tape.narrow(outputs, 2, 5 * r, r);
    let pen_logits = s.tape.narrow(outputs, 2, 6 * r, 3);

    let du = s.tape.constant(broadcast_col(targets, 0, r));
    let dv = s.tape.constant(broadcast_col(targets, 1, r));

    let log_pi = s.tape.log_softmax_last(pi_logits);
    let inv_sx = {
        let n = s.tape.neg(log_sx);
        s.tape.exp(n)
    };
    let inv_sy = {
        let n = s.tape.neg(log_sy);
        s.tape.exp(n)
    };
    let zx = {
        let dxm = s.tape.sub(du, mu_x);
        s.tape.mul(dxm, inv_sx)
    };
    let zy = {
        let dym = s.tape.sub(dv, mu_y);
        s.tape.mul(dym, inv_sy)
    };
    let rho = s.tape.tanh(rho_raw);
    let one_minus_rho2 = {
        let r2 = s.tape.mul(rho, rho);
        let n = s.tape.neg(r2);
        s.tape.add_scalar(n, F::one())
    };
    let quad = {
        let zx2 = s.tape.mul(zx, zx);
        let zy2 = s.tape.mul(zy, zy);
        let zxy = s.tape.mul(zx, zy);
        let cross = s.tape.mul(rho, zxy);
        let cross2 = s.tape.scale(cross, F::from_f64(2.0));
        let sums = s.tape.add(zx2, zy2);
        s.tape.sub(sums, cross2)
    };
    let log_n = {
        let om2 = s.tape.scale(one_minus_rho2, F::from_f64(2.0));
        let q_over = s.tape.div(quad, om2);
        let neg_q = s.tape.neg(q_over);
        let ln_om = s.tape.ln(one_minus_rho2);
        let half_ln_om = s.tape.scale(ln_om, F::from_f64(0.5));
        let a = s.tape.add_scalar(neg_q, F::from_f64(-(2.0 * std::f64::consts::PI).ln()));
        let b1 = s.tape.sub(a, log_sx);
        let b2 = s.tape.sub(b1, log_sy);
        s.tape.sub(b2, half_ln_om)
    };
    let log_mix = s.tape.add(log_pi, log_n);
    let log_density = s.tape.logsumexp_last(log_mix); // (B, T)
    let floored = s.tape.max_scalar(log_density, F::from_f64(DENSITY_FLOOR.ln()));
    let nll = s.tape.neg(floored);

    let mut mask = Array2::<F>::zeros((b, t));
    let mut total_real = 0usize;
    for (bi, &len) in real_lens.iter().enumerate() {
        let len = len.min(t);
        total_real += len;
        for ti in 0..len {
            mask[(bi, ti)] = F::one();
        }
    }
    let mask_c = s.tape.constant(mask.into_dyn());
    let masked = s.tape.mul(nll, mask_c);
    let pen_sum = s.tape.sum_all(masked);
    let pen = s.tape.scale(pen_sum, F::from_f64(1.0 / total_real.max(1) as f64));

    // pen state: negated cross-entropy over every step, padding included
    let mut onehot = Array3::<F>::zeros((b, t, 3));
    for bi in 0..b {
        for ti in 0..t {
            for k in 0..3 {
                onehot[(bi, ti, k)] = targets[[bi, ti, 2 + k]];
            }
        }
    }
    let log_pen = s.tape.log_softmax_last(pen_logits);
    let oh = s.tape.constant(onehot.into_dyn());
    let picked = s.tape.mul(oh, log_pen);
    let ce = s.tape.sum_axis(picked, 2); // (B, T)
    let ce_sum = s.tape.sum_all(ce);
    let cls = s.tape.scale(ce_sum, F::from_f64(-1.0 / (b * t) as f64));

    (pen, cls)
}
