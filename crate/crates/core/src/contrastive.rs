//! The two style-disentangling objectives.
//!
//! `writer_nce` pulls together projected features of characters written by
//! the same person (supervised InfoNCE over writer identities); `glyph_nce`
//! pulls together two independently sampled patch subsets of one character
//! while pushing away subsets from other characters. Projection heads `f1`
//! and `f2` map features into an l2-normalized space where inner products
//! are the similarities.

use crate::autodiff::{Scalar, Var};
use crate::nn::{Linear, ParamStore, Session};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("anchor {anchor} (writer {writer}) has no in-batch positive")]
    NoPositive { anchor: usize, writer: usize },
}

/// Temperature and patch-sampling ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.07,
            alpha: 0.25,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau <= 0.0 {
            return Err("tau must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err("alpha must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Two-layer MLP followed by row l2-normalization; the projected space
/// where both contrastive losses live.
pub struct ProjectionHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl ProjectionHead {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Self {
        ProjectionHead {
            l1: Linear::new(ps, &format!("{name}.l1"), c, c, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), c, c, rng),
        }
    }

    /// `(N, c) -> (N, c)` with unit-norm rows.
    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let h = self.l1.apply(s, x);
        let h = s.tape.relu(h);
        let h = self.l2.apply(s, h);
        s.tape.normalize_rows(h)
    }
}

/// Mean over the token axis: `(N, d, c) -> (N, c)`. Eq.-level similarities
/// need one vector per sample; the mean is permutation-invariant over the
/// unordered patch tokens.
pub fn pool_tokens<F: Scalar>(s: &mut Session<F>, x: Var) -> Var {
    s.tape.mean_axis(x, 1)
}

/// Uniform sample of `max(1, round(d * alpha))` distinct token indices.
pub fn sample_patch_indices(d: usize, alpha: f64, rng: &mut ChaCha12Rng) -> Vec<usize> {
    assert!(d >= 1);
    let n = ((d as f64 * alpha).round() as usize).clamp(1, d);
    // partial Fisher-Yates over 0..d
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..n {
        let j = rng.random_range(i..d);
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

/// Supervised contrastive loss over writer identities.
///
/// `z: (N, p)` projected unit-norm vectors; each anchor j is scored against
/// every other element, positives are the same-writer rows:
/// `-(1/N) * sum_j (1/|P(j)|) * sum_{p in P(j)} log softmax_j(sim/tau)[p]`.
pub fn writer_nce<F: Scalar>(
    s: &mut Session<F>,
    z: Var,
    writer_ids: &[usize],
    tau: f64,
) -> Result<Var, ContrastiveError> {
    let n = writer_ids.len();
    if n < 2 {
        return Err(ContrastiveError::BatchTooSmall(n));
    }
    assert_eq!(s.tape.value(z).shape()[0], n);

    let mut pos_weight = Array2::<F>::zeros((n, n));
    for j in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != j && writer_ids[p] == writer_ids[j])
            .collect();
        if positives.is_empty() {
            return Err(ContrastiveError::NoPositive {
                anchor: j,
                writer: writer_ids[j],
            });
        }
        let w = F::from_f64(1.0 / positives.len() as f64);
        for p in positives {
            pos_weight[(j, p)] = w;
        }
    }

    let inv_tau = F::from_f64(1.0 / tau);
    let sims = s.tape.matmul_nt(z, z);
    let scaled = s.tape.scale(sims, inv_tau);

    // exclude self-similarity from every denominator
    let mut diag = Array2::<F>::zeros((n, n));
    for j in 0..n {
        diag[(j, j)] = F::from_f64(-1e9);
    }
    let diag = s.tape.constant(diag.into_dyn());
    let masked = s.tape.add(scaled, diag);
    let log_denom = s.tape.logsumexp_last(masked);

    let wvar = s.tape.constant(pos_weight.into_dyn());
    let weighted = s.tape.mul(wvar, scaled);
    let pos_sum = s.tape.sum_all(weighted);
    let denom_sum = s.tape.sum_all(log_denom);
    let diff = s.tape.sub(denom_sum, pos_sum);
    Ok(s.tape.scale(diff, F::from_f64(1.0 / n as f64)))
}

/// Patch index sets drawn for one `glyph_nce` evaluation; kept so tests can
/// replay a draw.
pub struct GlyphSets {
    /// Anchor views `o` and `o+`, per sample.
    pub views: Vec<(Vec<usize>, Vec<usize>)>,
    /// Negative sets: for anchor `b`, one draw from every other sample,
    /// in ascending sample order.
    pub negatives: Vec<Vec<(usize, Vec<usize>)>>,
}

/// Draw the index sets for a batch: two independent views per anchor, one
/// negative set from each other sample per anchor.
pub fn draw_glyph_sets(
    batch: usize,
    d: usize,
    alpha: f64,
    rng: &mut ChaCha12Rng,
) -> GlyphSets {
    let views = (0..batch)
        .map(|_| {
            (
                sample_patch_indices(d, alpha, rng),
                sample_patch_indices(d, alpha, rng),
            )
        })
        .collect();
    let negatives = (0..batch)
        .map(|b| {
            (0..batch)
                .filter(|&j| j != b)
                .map(|j| (j, sample_patch_indices(d, alpha, rng)))
                .collect()
        })
        .collect();
    GlyphSets { views, negatives }
}

/// Character-wise contrastive loss over patch subsets (anchor-averaged).
///
/// `g: (B, d, c)` glyph-head token sequences. Per anchor `b`: pooled views
/// `o`, `o+` from `g_b` and one pooled negative from every other sample,
/// all projected by `head`; the loss is
/// `-log( exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau)) )`, averaged
/// over the `B` anchors. With `B = 1` there are no negatives and the loss
/// is exactly zero.
pub fn glyph_nce<F: Scalar>(
    s: &mut Session<F>,
    g: Var,
    head: &ProjectionHead,
    cfg: &ContrastiveConfig,
    sets: &GlyphSets,
) -> Var {
    let shape = s.tape.value(g).shape().to_vec();
    let b = shape[0];
    assert!(b >= 1);
    assert_eq!(sets.views.len(), b);

    // one flat pooled matrix: [o_0..o_{B-1} | o+_0..o+_{B-1} | negatives]
    let mut pool_list: Vec<(usize, Vec<usize>)> = Vec::new();
    for (bi, (o, _)) in sets.views.iter().enumerate() {
        pool_list.push((bi, o.clone()));
    }
    for (bi, (_, op)) in sets.views.iter().enumerate() {
        pool_list.push((bi, op.clone()));
    }
    for negs in &sets.negatives {
        for (j, idxs) in negs {
            pool_list.push((*j, idxs.clone()));
        }
    }
    let pooled = s.tape.pool_sets(g, &pool_list);
    let projected = head.apply(s, pooled);

    let inv_tau = F::from_f64(1.0 / cfg.tau);
    let o = s.tape.narrow(projected, 0, 0, b);
    let op = s.tape.narrow(projected, 0, b, b);
    let prod = s.tape.mul(o, op);
    let s_pos = s.tape.sum_axis(prod, 1);
    let s_pos = s.tape.scale(s_pos, inv_tau); // (B)

    if b == 1 {
        // Eq. with an empty negative sum: -log(e^x / e^x) = 0
        let sp = s.tape.reshape(s_pos, &[1, 1]);
        let lse = s.tape.logsumexp_last(sp);
        let z = s.tape.sub(lse, s_pos);
        return s.tape.sum_all(z);
    }

    let negs = s.tape.narrow(projected, 0, 2 * b, b * (b - 1));
    let rep_idx: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat_n(bi, b - 1)).collect();
    let o_rep = s.tape.index_select(o, &rep_idx);
    let nprod = s.tape.mul(o_rep, negs);
    let s_neg = s.tape.sum_axis(nprod, 1);
    let s_neg = s.tape.scale(s_neg, inv_tau);
    let s_neg = s.tape.reshape(s_neg, &[b, b - 1]); // (B, B-1)

    let s_pos_col = s.tape.reshape(s_pos, &[b, 1]);
    let all = s.tape.concat(1, &[s_pos_col, s_neg]);
    let lse = s.tape.logsumexp_last(all); // (B)
    let per_anchor = s.tape.sub(lse, s_pos);
    s.tape.mean_all(per_anchor)
}

/// Convenience wrapper when the caller just has an rng: draws sets, then
/// evaluates the loss.
pub fn glyph_nce_drawn<F: Scalar>(
    s: &mut Session<F>,
    g: Var,
    head: &ProjectionHead,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha12Rng,
) -> Var {
    let shape = s.tape.value(g).shape().to_vec();
    let sets = draw_glyph_sets(shape[0], shape[1], cfg.alpha, rng);
    glyph_nce(s, g, head, cfg, &sets)
}

/// Value-level helper used by spectrum analysis and tests: pooled, projected
/// features as plain arrays (no gradients kept).
pub fn project_pooled<F: Scalar>(
    params: &ParamStore<F>,
    head: &ProjectionHead,
    features: &ArrayD<F>,
) -> ArrayD<F> {
    let mut s = Session::new(params);
    let v = s.tape.constant(features.clone());
    let pooled = pool_tokens(&mut s, v);
    let projected = head.apply(&mut s, pooled);
    s.tape.value(projected).clone()
}
