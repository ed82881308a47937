//! Quantitative evaluation: length-normalized dynamic time warping, the
//! writer-consistency DTW matrix, content/style score classifiers over
//! offset sequences, and frequency-domain profiles of style features.

use crate::autodiff::{Scalar, Var};
use crate::nn::{Linear, ParamStore, Session};
use crate::optim::Adam;
use crate::trajectory::{to_absolute, OnlineCharacter};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("group shapes do not align: {0}")]
    ShapeMismatch(String),
    #[error("token count {d} does not factor as {h}x{w}")]
    BadTokenGrid { d: usize, h: usize, w: usize },
    #[error("classifier is untrained")]
    Untrained,
}

// ---- dynamic time warping --------------------------------------------------

/// Absolute ink coordinates of the real (unpadded) points.
pub fn ink_points(ch: &OnlineCharacter) -> Vec<[f64; 2]> {
    to_absolute(ch).into_iter().flatten().collect()
}

/// Classical DTW with Euclidean local cost and the symmetric
/// match/insert/delete step pattern.
pub fn dtw_raw(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![f64::INFINITY; m + 1];
    let mut prev = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        dp[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = ((a[i - 1][0] - b[j - 1][0]).powi(2)
                + (a[i - 1][1] - b[j - 1][1]).powi(2))
            .sqrt();
            dp[j] = cost + prev[j].min(dp[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut dp, &mut prev);
    }
    prev[m]
}

/// DTW between a generated and a real character, normalized by the real
/// character's ink point count.
pub fn dtw_distance(generated: &OnlineCharacter, real: &OnlineCharacter) -> Result<f64, EvalError> {
    let a = ink_points(generated);
    let b = ink_points(real);
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    Ok(dtw_raw(&a, &b) / b.len() as f64)
}

/// Writer-consistency matrix: `C[i][j]` is the mean DTW between writer
/// `i`'s characters from group `a` and writer `j`'s from group `b`,
/// matched by character index.
pub fn dtw_matrix(
    group_a: &[Vec<OnlineCharacter>],
    group_b: &[Vec<OnlineCharacter>],
) -> Result<Array2<f64>, EvalError> {
    let t = group_a.len();
    if t != group_b.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} vs {} writers",
            t,
            group_b.len()
        )));
    }
    let m = group_a.first().map(|v| v.len()).unwrap_or(0);
    for (idx, g) in group_a.iter().chain(group_b.iter()).enumerate() {
        if g.len() != m {
            return Err(EvalError::ShapeMismatch(format!(
                "group {idx} has {} characters, expected {m}",
                g.len()
            )));
        }
    }
    let mut c = Array2::<f64>::zeros((t, t));
    for i in 0..t {
        for j in 0..t {
            let mut sum = 0.0;
            for k in 0..m {
                sum += dtw_distance(&group_a[i][k], &group_b[j][k])?;
            }
            c[(i, j)] = sum / m as f64;
        }
    }
    Ok(c)
}

// ---- offset-sequence classifiers --------------------------------------------

/// Pack characters into padded `(N, T, 5)` rows plus real lengths.
pub fn chars_to_rows<F: Scalar>(chars: &[&OnlineCharacter], t: usize) -> (Array3<F>, Vec<usize>) {
    let n = chars.len();
    let mut rows = Array3::<F>::zeros((n, t, 5));
    let mut lens = Vec::with_capacity(n);
    for (i, ch) in chars.iter().enumerate() {
        let real = ch.real_len().min(t);
        lens.push(real);
        for ti in 0..t {
            let row = if ti < ch.len() {
                ch.points[ti].row()
            } else {
                [0.0, 0.0, 0.0, 0.0, 1.0]
            };
            for (j, v) in row.iter().enumerate() {
                rows[(i, ti, j)] = F::from_f64(*v);
            }
        }
    }
    (rows, lens)
}

/// Small temporal-conv classifier over 5-element offset rows. Used both as
/// the per-character content recognizer and, with set pooling, as the
/// writer identifier.
pub struct SeqClassifier<F: Scalar> {
    pub params: ParamStore<F>,
    embed: Linear,
    conv1: (crate::nn::PId, crate::nn::PId),
    conv2: (crate::nn::PId, crate::nn::PId),
    out: Linear,
    pub hidden: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierOpts {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOpts {
    fn default() -> Self {
        ClassifierOpts {
            hidden: 48,
            epochs: 8,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl<F: Scalar> SeqClassifier<F> {
    pub fn new(hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let embed = Linear::new(&mut ps, "embed", 5, hidden, &mut rng);
        let w1 = ps.add(
            "conv1.w",
            crate::nn::he_normal(&mut rng, &[hidden, hidden * 3], hidden * 3),
        );
        let b1 = ps.add("conv1.b", crate::nn::zeros(&[hidden]));
        let w2 = ps.add(
            "conv2.w",
            crate::nn::he_normal(&mut rng, &[hidden, hidden * 3], hidden * 3),
        );
        let b2 = ps.add("conv2.b", crate::nn::zeros(&[hidden]));
        let out = Linear::new(&mut ps, "out", hidden, n_out, &mut rng);
        SeqClassifier {
            params: ps,
            embed,
            conv1: (w1, b1),
            conv2: (w2, b2),
            out,
            hidden,
            n_out,
        }
    }

    /// Masked-mean character embeddings: `(N, T, 5)` rows -> `(N, hidden)`.
    fn char_embeddings(&self, s: &mut Session<F>, rows: Var, lens: &[usize]) -> Var {
        let shape = s.tape.value(rows).shape().to_vec();
        let (n, t) = (shape[0], shape[1]);
        let h = self.hidden;
        let x = self.embed.apply(s, rows); // (N, T, h)
        let x = s.tape.permute(x, &[0, 2, 1]); // (N, h, T)
        let x = s.tape.reshape(x, &[n, h, 1, t]);
        let x = s
            .tape
            .conv2d(x, s.var(self.conv1.0), s.var(self.conv1.1), 1, 3, 1, 0, 1);
        let x = s.tape.relu(x);
        let x = s
            .tape
            .conv2d(x, s.var(self.conv2.0), s.var(self.conv2.1), 1, 3, 1, 0, 1);
        let x = s.tape.relu(x);
        let x = s.tape.reshape(x, &[n, h, t]);

        let mut mask = Array3::<F>::zeros((n, h, t));
        let mut inv = Array2::<F>::zeros((n, h));
        for i in 0..n {
            let len = lens[i].max(1).min(t);
            let w = F::from_f64(1.0 / len as f64);
            for c in 0..h {
                inv[(i, c)] = w;
                for ti in 0..len {
                    mask[(i, c, ti)] = F::one();
                }
            }
        }
        let mask_v = s.tape.constant(mask.into_dyn());
        let masked = s.tape.mul(x, mask_v);
        let summed = s.tape.sum_axis(masked, 2); // (N, h)
        let inv_v = s.tape.constant(inv.into_dyn());
        s.tape.mul(summed, inv_v)
    }

    /// Per-character logits.
    pub fn char_logits(&self, s: &mut Session<F>, rows: Var, lens: &[usize]) -> Var {
        let emb = self.char_embeddings(s, rows, lens);
        self.out.apply(s, emb)
    }

    /// Set-level logits: `rows` holds `S * k` characters, consecutive
    /// characters form a set; embeddings are mean-pooled per set.
    pub fn set_logits(&self, s: &mut Session<F>, rows: Var, lens: &[usize], k: usize) -> Var {
        let n = s.tape.value(rows).shape()[0];
        assert_eq!(n % k, 0);
        let emb = self.char_embeddings(s, rows, lens);
        let emb = s.tape.reshape(emb, &[n / k, k, self.hidden]);
        let pooled = s.tape.mean_axis(emb, 1);
        self.out.apply(s, pooled)
    }

    fn ce_loss(&self, s: &mut Session<F>, logits: Var, labels: &[usize]) -> Var {
        let n = labels.len();
        let mut onehot = Array2::<F>::zeros((n, self.n_out));
        for (i, &l) in labels.iter().enumerate() {
            onehot[(i, l)] = F::one();
        }
        let lp = s.tape.log_softmax_last(logits);
        let oh = s.tape.constant(onehot.into_dyn());
        let picked = s.tape.mul(oh, lp);
        let total = s.tape.sum_all(picked);
        s.tape.scale(total, F::from_f64(-1.0 / n as f64))
    }

    fn predictions(logits: &ArrayD<F>) -> Vec<usize> {
        let shape = logits.shape();
        (0..shape[0])
            .map(|i| {
                (0..shape[1])
                    .max_by(|&a, &b| {
                        logits[[i, a]]
                            .partial_cmp(&logits[[i, b]])
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap()
            })
            .collect()
    }

    /// Train as a per-character classifier.
    pub fn fit_chars(
        &mut self,
        rows: &Array3<F>,
        lens: &[usize],
        labels: &[usize],
        opts: &ClassifierOpts,
    ) {
        self.fit_impl(rows, lens, labels, 1, opts);
    }

    /// Train as a set classifier over blocks of `k` consecutive characters.
    pub fn fit_sets(
        &mut self,
        rows: &Array3<F>,
        lens: &[usize],
        set_labels: &[usize],
        k: usize,
        opts: &ClassifierOpts,
    ) {
        self.fit_impl(rows, lens, set_labels, k, opts);
    }

    fn fit_impl(
        &mut self,
        rows: &Array3<F>,
        lens: &[usize],
        labels: &[usize],
        k: usize,
        opts: &ClassifierOpts,
    ) {
        let n_units = labels.len();
        assert_eq!(rows.dim().0, n_units * k);
        let mut adam = Adam::new(&self.params, opts.lr);
        let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..n_units).collect();
        for _ in 0..opts.epochs {
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(opts.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut batch_rows =
                    Array3::<F>::zeros((chunk.len() * k, rows.dim().1, rows.dim().2));
                let mut batch_lens = Vec::with_capacity(chunk.len() * k);
                let mut batch_labels = Vec::with_capacity(chunk.len());
                for (bi, &u) in chunk.iter().enumerate() {
                    for ki in 0..k {
                        batch_rows
                            .index_axis_mut(ndarray::Axis(0), bi * k + ki)
                            .assign(&rows.index_axis(ndarray::Axis(0), u * k + ki));
                        batch_lens.push(lens[u * k + ki]);
                    }
                    batch_labels.push(labels[u]);
                }
                let mut s = Session::new(&self.params);
                let rv = s.tape.constant(batch_rows.into_dyn());
                let logits = if k == 1 {
                    self.char_logits(&mut s, rv, &batch_lens)
                } else {
                    self.set_logits(&mut s, rv, &batch_lens, k)
                };
                let loss = self.ce_loss(&mut s, logits, &batch_labels);
                let grads = s.tape.backward(loss);
                adam.apply(&mut self.params, &s, &grads, 5.0);
            }
        }
    }

    pub fn predict_chars(&self, rows: &Array3<F>, lens: &[usize]) -> Vec<usize> {
        let mut s = Session::new(&self.params);
        let rv = s.tape.constant(rows.clone().into_dyn());
        let logits = self.char_logits(&mut s, rv, lens);
        Self::predictions(s.tape.value(logits))
    }

    pub fn predict_sets(&self, rows: &Array3<F>, lens: &[usize], k: usize) -> Vec<usize> {
        let mut s = Session::new(&self.params);
        let rv = s.tape.constant(rows.clone().into_dyn());
        let logits = self.set_logits(&mut s, rv, lens, k);
        Self::predictions(s.tape.value(logits))
    }
}

/// Top-1 accuracy.
pub fn accuracy(predicted: &[usize], expected: &[usize]) -> f64 {
    assert_eq!(predicted.len(), expected.len());
    let hits = predicted
        .iter()
        .zip(expected.iter())
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / predicted.len().max(1) as f64
}

// ---- spectrum analysis -------------------------------------------------------

/// 2-D DFT magnitude of channel-averaged feature tokens, DC shifted to the
/// center, plus the high-frequency energy fraction (energy at radius above
/// half the Nyquist radius).
pub fn spectrum_profile(
    tokens: &Array2<f64>,
    h: usize,
    w: usize,
) -> Result<(Array2<f64>, f64), EvalError> {
    let (d, _c) = tokens.dim();
    if d != h * w {
        return Err(EvalError::BadTokenGrid { d, h, w });
    }
    // average over channels, reshape tokens row-major to the grid
    let mut map = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let row = tokens.row(y * w + x);
            map[(y, x)] = row.iter().sum::<f64>() / row.len() as f64;
        }
    }
    let mut mag = Array2::<f64>::zeros((h, w));
    for ky in 0..h {
        for kx in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                    re += map[(y, x)] * phase.cos();
                    im += map[(y, x)] * phase.sin();
                }
            }
            // shift so DC lands at (h/2, w/2)
            let sy = (ky + h / 2) % h;
            let sx = (kx + w / 2) % w;
            mag[(sy, sx)] = (re * re + im * im).sqrt();
        }
    }
    let r_half = h.min(w) as f64 / 4.0;
    let mut total = 0.0;
    let mut high = 0.0;
    for sy in 0..h {
        for sx in 0..w {
            let fy = sy as f64 - (h / 2) as f64;
            let fx = sx as f64 - (w / 2) as f64;
            let e = mag[(sy, sx)] * mag[(sy, sx)];
            total += e;
            if (fy * fy + fx * fx).sqrt() > r_half {
                high += e;
            }
        }
    }
    let ratio = if total > 0.0 { high / total } else { 0.0 };
    Ok((mag, ratio))
}

/// Magnitude map averaged over samples and the mean high-frequency ratio.
pub fn spectrum_summary(
    samples: &[Array2<f64>],
    h: usize,
    w: usize,
) -> Result<(Array2<f64>, f64), EvalError> {
    assert!(!samples.is_empty());
    let mut mean_map = Array2::<f64>::zeros((h, w));
    let mut mean_ratio = 0.0;
    for tokens in samples {
        let (map, ratio) = spectrum_profile(tokens, h, w)?;
        mean_map += &map;
        mean_ratio += ratio;
    }
    let n = samples.len() as f64;
    mean_map.mapv_inplace(|v| v / n);
    Ok((mean_map, mean_ratio / n))
}

// ---- report ---------------------------------------------------------------------

/// Per-writer evaluation slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WriterEval {
    pub mean_dtw: f64,
    pub content_score: f64,
    pub hf_ratio_writer: f64,
    pub hf_ratio_glyph: f64,
}

/// Aggregate evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_dtw: f64,
    pub content_score: f64,
    pub style_score: f64,
    pub hf_ratio_writer: f64,
    pub hf_ratio_glyph: f64,
    pub per_writer: BTreeMap<String, WriterEval>,
}

impl EvalReport {
    pub fn check_invariants(&self) -> bool {
        (0.0..=1.0).contains(&self.content_score)
            && (0.0..=1.0).contains(&self.style_score)
            && self.mean_dtw >= 0.0
    }
}

/// Extract per-sample token matrices (`d x c` in f64) from a feature array
/// `(N, d, c)`, for spectrum analysis.
pub fn feature_token_matrices<F: Scalar>(features: &ArrayD<F>) -> Vec<Array2<f64>> {
    let shape = features.shape();
    let (n, d, c) = (shape[0], shape[1], shape[2]);
    (0..n)
        .map(|i| Array2::from_shape_fn((d, c), |(t, ch)| features[[i, t, ch]].to_f64()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{PenState, TrajectoryPoint};

    /// Independent memoized recursive DTW, the brute-force oracle.
    fn dtw_oracle(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        fn go(
            a: &[[f64; 2]],
            b: &[[f64; 2]],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), f64>,
        ) -> f64 {
            if i == 0 && j == 0 {
                return 0.0;
            }
            if i == 0 || j == 0 {
                return f64::INFINITY;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let cost = ((a[i - 1][0] - b[j - 1][0]).powi(2)
                + (a[i - 1][1] - b[j - 1][1]).powi(2))
            .sqrt();
            let best = go(a, b, i - 1, j, memo)
                .min(go(a, b, i, j - 1, memo))
                .min(go(a, b, i - 1, j - 1, memo));
            let v = cost + best;
            memo.insert((i, j), v);
            v
        }
        let mut memo = std::collections::HashMap::new();
        go(a, b, a.len(), b.len(), &mut memo)
    }

    fn rand_seq(len: usize, rng: &mut ChaCha12Rng) -> Vec<[f64; 2]> {
        (0..len)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect()
    }

    fn char_from_points(points: &[[f64; 2]]) -> OnlineCharacter {
        let mut prev = [0.0, 0.0];
        let mut out = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let state = if i + 1 == points.len() {
                PenState::End
            } else {
                PenState::Down
            };
            out.push(TrajectoryPoint::new(p[0] - prev[0], p[1] - prev[1], state));
            prev = *p;
        }
        OnlineCharacter::new(out)
    }

    #[test]
    fn dtw_zero_on_identical_and_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = rand_seq(rng.random_range(1..=8), &mut rng);
            let b = rand_seq(rng.random_range(1..=8), &mut rng);
            let got = dtw_raw(&a, &b);
            let want = dtw_oracle(&a, &b);
            assert_eq!(got, want, "dp must equal the exhaustive recursion");
            assert_eq!(dtw_raw(&a, &a), 0.0);
        }
    }

    #[test]
    fn dtw_normalization_by_real_length() {
        let a = rand_seq(6, &mut ChaCha12Rng::seed_from_u64(2));
        let b = rand_seq(9, &mut ChaCha12Rng::seed_from_u64(3));
        let ga = char_from_points(&a);
        let gb = char_from_points(&b);
        let normalized = dtw_distance(&ga, &gb).unwrap();
        assert!((normalized * 9.0 - dtw_raw(&a, &b)).abs() < 1e-12);

        // duplicate-point construction: a generated char that traces the
        // real char exactly keeps raw DTW (zero) unchanged when the real
        // points are duplicated, so the normalized value scales by L/L'
        let dup: Vec<[f64; 2]> = b.iter().flat_map(|p| [*p, *p]).collect();
        let gdup = char_from_points(&dup);
        assert_eq!(dtw_raw(&b, &b), dtw_raw(&b, &dup));
        let n1 = dtw_distance(&gb, &gb).unwrap();
        let n2 = dtw_distance(&gb, &gdup).unwrap();
        assert_eq!(n1, 0.0);
        assert_eq!(n2, 0.0);
    }

    #[test]
    fn dtw_matrix_diagonal_and_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let group: Vec<Vec<OnlineCharacter>> = (0..3)
            .map(|_| {
                (0..2)
                    .map(|_| char_from_points(&rand_seq(5, &mut rng)))
                    .collect()
            })
            .collect();
        let c = dtw_matrix(&group, &group).unwrap();
        for i in 0..3 {
            assert_eq!(c[(i, i)], 0.0);
        }
        // independent double-loop evaluation
        for i in 0..3 {
            for j in 0..3 {
                let mut want = 0.0;
                for m in 0..2 {
                    want += dtw_distance(&group[i][m], &group[j][m]).unwrap();
                }
                want /= 2.0;
                assert!((c[(i, j)] - want).abs() < 1e-12);
            }
        }

        // T=1, M=1 reduces to a single distance
        let a = vec![vec![char_from_points(&rand_seq(4, &mut rng))]];
        let b = vec![vec![char_from_points(&rand_seq(6, &mut rng))]];
        let c = dtw_matrix(&a, &b).unwrap();
        assert_eq!(c[(0, 0)], dtw_distance(&a[0][0], &b[0][0]).unwrap());
    }

    #[test]
    fn classifier_learns_separable_sequences() {
        // class 0 drifts right, class 1 drifts up, class 2 drifts left
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let t = 12;
        let n = 120;
        let mut rows = Array3::<f64>::zeros((n, t, 5));
        let mut lens = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 3;
            let (dx, dy) = match class {
                0 => (0.1, 0.0),
                1 => (0.0, 0.1),
                _ => (-0.1, 0.0),
            };
            let len = rng.random_range(6..=t);
            lens.push(len);
            labels.push(class);
            for ti in 0..t {
                if ti < len {
                    rows[(i, ti, 0)] = dx + rng.random_range(-0.02..0.02);
                    rows[(i, ti, 1)] = dy + rng.random_range(-0.02..0.02);
                    let state = if ti + 1 == len { 4 } else { 2 };
                    rows[(i, ti, state)] = 1.0;
                } else {
                    rows[(i, ti, 4)] = 1.0;
                }
            }
        }
        let opts = ClassifierOpts {
            hidden: 16,
            epochs: 12,
            batch: 24,
            lr: 3e-3,
            seed: 1,
        };
        let mut clf = SeqClassifier::<f64>::new(opts.hidden, 3, opts.seed);
        clf.fit_chars(&rows, &lens, &labels, &opts);
        let preds = clf.predict_chars(&rows, &lens);
        let acc = accuracy(&preds, &labels);
        assert!(acc >= 0.95, "separable sequences should classify: {acc}");
    }

    #[test]
    fn set_classifier_pools_over_members() {
        // writer 0 drifts right, writer 1 drifts up; sets of 3 characters
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let t = 10;
        let k = 3;
        let n_sets = 40;
        let mut rows = Array3::<f64>::zeros((n_sets * k, t, 5));
        let mut lens = Vec::new();
        let mut labels = Vec::new();
        for si in 0..n_sets {
            let writer = si % 2;
            labels.push(writer);
            for ki in 0..k {
                let i = si * k + ki;
                let len = rng.random_range(5..=t);
                lens.push(len);
                for ti in 0..t {
                    if ti < len {
                        let (dx, dy) = if writer == 0 { (0.08, 0.01) } else { (0.01, 0.08) };
                        rows[(i, ti, 0)] = dx + rng.random_range(-0.03..0.03);
                        rows[(i, ti, 1)] = dy + rng.random_range(-0.03..0.03);
                        let state = if ti + 1 == len { 4 } else { 2 };
                        rows[(i, ti, state)] = 1.0;
                    } else {
                        rows[(i, ti, 4)] = 1.0;
                    }
                }
            }
        }
        let opts = ClassifierOpts {
            hidden: 16,
            epochs: 15,
            batch: 16,
            lr: 3e-3,
            seed: 2,
        };
        let mut clf = SeqClassifier::<f64>::new(opts.hidden, 2, opts.seed);
        clf.fit_sets(&rows, &lens, &labels, k, &opts);
        let preds = clf.predict_sets(&rows, &lens, k);
        let acc = accuracy(&preds, &labels);
        assert!(acc >= 0.95, "separable writer sets should classify: {acc}");
    }

    #[test]
    fn spectrum_constant_map_all_dc() {
        let tokens = Array2::<f64>::from_elem((16, 3), 0.7);
        let (mag, ratio) = spectrum_profile(&tokens, 4, 4).unwrap();
        assert!(ratio < 1e-12, "constant map leaked energy: {ratio}");
        // DC sits at the center after the shift
        assert!(mag[(2, 2)] > 1.0);
        let off_dc: f64 = mag
            .indexed_iter()
            .filter(|((y, x), _)| !(*y == 2 && *x == 2))
            .map(|(_, v)| *v)
            .sum();
        assert!(off_dc < 1e-9);
    }

    #[test]
    fn spectrum_checkerboard_high_frequency() {
        let mut tokens = Array2::<f64>::zeros((16, 2));
        for y in 0..4 {
            for x in 0..4 {
                let v = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                tokens[(y * 4 + x, 0)] = v;
                tokens[(y * 4 + x, 1)] = v;
            }
        }
        let (mag, ratio) = spectrum_profile(&tokens, 4, 4).unwrap();
        assert!(ratio > 0.99, "checkerboard should be pure Nyquist: {ratio}");
        // Nyquist corner (ky=kx=2) shifts to (0, 0)
        assert!(mag[(0, 0)] > 1.0);
    }

    #[test]
    fn spectrum_parseval_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10 {
            let tokens = Array2::<f64>::from_shape_fn((16, 4), |_| rng.random_range(-1.0..1.0));
            let (mag, _) = spectrum_profile(&tokens, 4, 4).unwrap();
            // channel-averaged signal
            let mut signal = Array2::<f64>::zeros((4, 4));
            for y in 0..4 {
                for x in 0..4 {
                    let row = tokens.row(y * 4 + x);
                    signal[(y, x)] = row.iter().sum::<f64>() / 4.0;
                }
            }
            let lhs: f64 = mag.iter().map(|&v| v * v).sum();
            let rhs: f64 = 16.0 * signal.iter().map(|&v| v * v).sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-6 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn spectrum_rejects_bad_grid() {
        let tokens = Array2::<f64>::zeros((10, 2));
        assert!(matches!(
            spectrum_profile(&tokens, 4, 4),
            Err(EvalError::BadTokenGrid { d: 10, h: 4, w: 4 })
        ));
    }
}
