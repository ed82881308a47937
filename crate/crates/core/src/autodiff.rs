//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles and can
//! replay the chain rule backwards from a scalar loss. The op set is exactly
//! what the models in this crate need: dense/convolution kernels, fused
//! scaled-dot-product attention, reductions, and the usual pointwise zoo.
//!
//! Determinism contract: every op produces bitwise-identical results
//! regardless of the rayon thread count. Parallel kernels split work into
//! fixed-size chunks with disjoint outputs and reduce partials in index
//! order; no atomics, no unordered reductions.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Element type for tensors: training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Self::from_f64(z)
    }

    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        Self::from_f64(rng.random_range(lo..hi))
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient accumulator passed to backward closures.
pub struct GradSink<'a, F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
    tracked: &'a [bool],
}

impl<'a, F: Scalar> GradSink<'a, F> {
    /// Accumulate `delta` into the gradient of node `idx`.
    pub fn add(&mut self, idx: usize, delta: ArrayD<F>) {
        if !self.tracked[idx] {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn take(&mut self, idx: usize) -> Option<ArrayD<F>> {
        self.grads[idx].take()
    }
}

type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &[ArrayD<F>], &mut GradSink<F>)>;

/// Gradients keyed by node index, as returned by [`Tape::backward`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape<F: Scalar> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
    tracked: Vec<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fixed row-chunk size for parallel GEMM. Chunking is independent of the
/// thread count so results are bitwise identical for any pool size.
const GEMM_CHUNK: usize = 128;

/// `a @ b` with deterministic row-parallelism.
pub fn par_gemm<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm inner dims: {} vs {}", k, k2);
    let mut out = Array2::<F>::zeros((m, n));
    if m <= GEMM_CHUNK {
        ndarray::linalg::general_mat_mul(F::one(), &a, &b, F::zero(), &mut out.view_mut());
        return out;
    }
    let a_chunks: Vec<ArrayView2<F>> = a.axis_chunks_iter(Axis(0), GEMM_CHUNK).collect();
    let out_chunks: Vec<ArrayViewMut2<F>> = out.axis_chunks_iter_mut(Axis(0), GEMM_CHUNK).collect();
    a_chunks
        .into_par_iter()
        .zip(out_chunks.into_par_iter())
        .for_each(|(ac, mut oc)| {
            ndarray::linalg::general_mat_mul(F::one(), &ac, &b, F::zero(), &mut oc);
        });
    out
}

fn as_2d<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    let n = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / n.max(1);
    a.view()
        .into_shape_with_order((rows, n))
        .expect("standard layout")
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            tracked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drop every node recorded after `mark`, keeping earlier ones alive.
    /// Used by the sampler to reuse bound weights across decoding steps.
    pub fn truncate(&mut self, mark: usize) {
        self.values.truncate(mark);
        self.backs.truncate(mark);
        self.tracked.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    fn push(&mut self, value: ArrayD<F>, back: Option<BackFn<F>>, tracked: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.backs.push(back);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// Differentiable leaf (weights, probe inputs).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, None, true)
    }

    /// Non-differentiable input (targets, masks, positional tables).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, None, false)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// Run the chain rule backwards from scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut sink = GradSink {
            grads: (0..self.values.len()).map(|_| None).collect(),
            tracked: &self.tracked,
        };
        sink.grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.backs[i] {
                if let Some(g) = sink.take(i) {
                    back(&g, &self.values, &mut sink);
                }
            }
        }
        Grads { grads: sink.grads }
    }

    // ---- pointwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] + &self.values[b.0];
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.clone());
            })),
            tracked,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] - &self.values[b.0];
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.mapv(|x| -x));
            })),
            tracked,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] * &self.values[b.0];
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                sink.add(a.0, g * &v[b.0]);
                sink.add(b.0, g * &v[a.0]);
            })),
            tracked,
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] / &self.values[b.0];
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                sink.add(a.0, g / &v[b.0]);
                let db = g * &v[a.0] / &(&v[b.0] * &v[b.0]);
                sink.add(b.0, db.mapv(|x| -x));
            })),
            tracked,
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| -x);
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                sink.add(a.0, g.mapv(|x| -x));
            })),
            tracked,
        )
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.values[a.0].mapv(|x| x * s);
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                sink.add(a.0, g.mapv(|x| x * s));
            })),
            tracked,
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.values[a.0].mapv(|x| x + s);
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                sink.add(a.0, g.clone());
            })),
            tracked,
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.exp());
        let tracked = self.tracked[a.0];
        let idx = self.push(
            out,
            None, // replaced below; needs own index
            tracked,
        );
        let out_idx = idx.0;
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            sink.add(a.0, g * &v[out_idx]);
        }));
        idx
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.ln());
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                sink.add(a.0, g / &v[a.0]);
            })),
            tracked,
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.sqrt());
        let tracked = self.tracked[a.0];
        let idx = self.push(out, None, tracked);
        let out_idx = idx.0;
        let half = F::from_f64(0.5);
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            sink.add(a.0, g.mapv(|x| x * half) / &v[out_idx]);
        }));
        idx
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.tanh());
        let tracked = self.tracked[a.0];
        let idx = self.push(out, None, tracked);
        let out_idx = idx.0;
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            let y = &v[out_idx];
            sink.add(a.0, g * &y.mapv(|t| F::one() - t * t));
        }));
        idx
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&v[a.0]).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero();
                    }
                });
                sink.add(a.0, dx);
            })),
            tracked,
        )
    }

    /// `max(a, s)` elementwise; gradient flows only where `a > s`.
    pub fn max_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.values[a.0].mapv(|x| if x > s { x } else { s });
        let tracked = self.tracked[a.0];
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&v[a.0]).for_each(|d, &x| {
                    if x <= s {
                        *d = F::zero();
                    }
                });
                sink.add(a.0, dx);
            })),
            tracked,
        )
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let tracked = self.tracked[a.0];
        let orig = self.values[a.0].shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                let gg = g
                    .clone()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape back");
                sink.add(a.0, gg);
            })),
            tracked,
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let tracked = self.tracked[a.0];
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                let gg = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                sink.add(a.0, gg);
            })),
            tracked,
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .to_owned();
        let tracked = self.tracked_any(parts);
        let parts: Vec<Var> = parts.to_vec();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| self.values[p.0].shape()[axis])
            .collect();
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                let mut start = 0usize;
                for (p, sz) in parts.iter().zip(&sizes) {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .as_standard_layout()
                        .to_owned();
                    sink.add(p.0, piece);
                    start += sz;
                }
            })),
            tracked,
        )
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = self.values[a.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let tracked = self.tracked[a.0];
        let full = self.values[a.0].raw_dim();
        self.push(
            out,
            Some(Box::new(move |g, _v, sink| {
                let mut dx = ArrayD::<F>::zeros(full.clone());
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                sink.add(a.0, dx);
            })),
            tracked,
        )
    }

    /// Gather rows along axis 0; indices may repeat.
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = &self.values[a.0];
        let out = src.select(Axis(0), rows);
        let tracked = self.tracked[a.0];
        let rows: Vec<usize> = rows.to_vec();
        let full = src.raw_dim();
        self.push(
            out.as_standard_layout().to_owned(),
            Some(Box::new(move |g, _v, sink| {
                let mut dx = ArrayD::<F>::zeros(full.clone());
                for (gi, &r) in rows.iter().enumerate() {
                    let gslice = g.index_axis(Axis(0), gi);
                    let mut dst = dx.index_axis_mut(Axis(0), r);
                    dst += &gslice;
                }
                sink.add(a.0, dx);
            })),
            tracked,
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let tracked = self.tracked[a.0];
        let shape = self.values[a.0].raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |g, _v, sink| {
                let gs = g[[]];
                sink.add(a.0, ArrayD::from_elem(shape.clone(), gs));
            })),
            tracked,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_f64(self.values[a.0].len() as f64);
        let s = self.sum_all(a);
        self.scale(s, F::one() / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let out = self.values[a.0].sum_axis(Axis(axis));
        let tracked = self.tracked[a.0];
        let dim_len = self.values[a.0].shape()[axis];
        self.push(
            out.as_standard_layout().to_owned(),
            Some(Box::new(move |g, _v, sink| {
                let mut gg = g.clone().insert_axis(Axis(axis));
                let reps: Vec<usize> = gg
                    .shape()
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| if i == axis { dim_len } else { s })
                    .collect();
                gg = gg.broadcast(IxDyn(&reps)).unwrap().to_owned();
                sink.add(a.0, gg);
            })),
            tracked,
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = F::from_f64(self.values[a.0].shape()[axis] as f64);
        let s = self.sum_axis(a, axis);
        self.scale(s, F::one() / n)
    }

    // ---- softmax family (last axis) -------------------------------------

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        {
            let n = *out.shape().last().unwrap();
            let rows = out.len() / n;
            let mut flat = out.view_mut().into_shape_with_order((rows, n)).unwrap();
            for mut row in flat.rows_mut() {
                softmax_row(&mut row);
            }
        }
        let tracked = self.tracked[a.0];
        let idx = self.push(out, None, tracked);
        let out_idx = idx.0;
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            let y = as_2d(&v[out_idx]);
            let g2 = as_2d(g);
            let mut dx = Array2::<F>::zeros(y.raw_dim());
            for ((mut dr, yr), gr) in dx.rows_mut().into_iter().zip(y.rows()).zip(g2.rows()) {
                let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            sink.add(a.0, dx.into_dyn().into_shape_with_order(g.raw_dim()).unwrap());
        }));
        idx
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        {
            let n = *out.shape().last().unwrap();
            let rows = out.len() / n;
            let mut flat = out.view_mut().into_shape_with_order((rows, n)).unwrap();
            for mut row in flat.rows_mut() {
                let lse = logsumexp_row(&row.view());
                row.mapv_inplace(|v| v - lse);
            }
        }
        let tracked = self.tracked[a.0];
        let idx = self.push(out, None, tracked);
        let out_idx = idx.0;
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            let y = as_2d(&v[out_idx]); // log-probs
            let g2 = as_2d(g);
            let mut dx = Array2::<F>::zeros(y.raw_dim());
            for ((mut dr, yr), gr) in dx.rows_mut().into_iter().zip(y.rows()).zip(g2.rows()) {
                let gsum: F = gr.iter().copied().sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *d = gv - yv.exp() * gsum;
                }
            }
            sink.add(a.0, dx.into_dyn().into_shape_with_order(g.raw_dim()).unwrap());
        }));
        idx
    }

    /// Log-sum-exp over the last axis; output drops that axis.
    pub fn logsumexp_last(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let n = *x.shape().last().unwrap();
        let rows = x.len() / n;
        let flat = x.view().into_shape_with_order((rows, n)).unwrap();
        let mut out = Array1::<F>::zeros(rows);
        for (o, row) in out.iter_mut().zip(flat.rows()) {
            *o = logsumexp_row(&row);
        }
        let out_shape: Vec<usize> = x.shape()[..x.ndim() - 1].to_vec();
        let out = out.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let tracked = self.tracked[a.0];
        let idx = self.push(out, None, tracked);
        let out_idx = idx.0;
        self.backs[out_idx] = Some(Box::new(move |g, v, sink| {
            let x2 = as_2d(&v[a.0]);
            let lse = &v[out_idx];
            let gflat = g.view().into_shape_with_order(x2.nrows()).unwrap();
            let lflat = lse.view().into_shape_with_order(x2.nrows()).unwrap();
            let mut dx = Array2::<F>::zeros(x2.raw_dim());
            for ((mut dr, xr), (&gv, &lv)) in dx
                .rows_mut()
                .into_iter()
                .zip(x2.rows())
                .zip(gflat.iter().zip(lflat.iter()))
            {
                for (d, &xv) in dr.iter_mut().zip(xr.iter()) {
                    *d = gv * (xv - lv).exp();
                }
            }
            sink.add(a.0, dx.into_dyn().into_shape_with_order(v[a.0].raw_dim()).unwrap());
        }));
        idx
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product `a (m,k) @ b (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as_2d(&self.values[a.0]).to_owned();
        let bv = as_2d(&self.values[b.0]).to_owned();
        let out = par_gemm(av.view(), bv.view());
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, v, sink| {
                let g2 = as_2d(g);
                let av = as_2d(&v[a.0]);
                let bv = as_2d(&v[b.0]);
                let da = par_gemm(g2, bv.t());
                let db = par_gemm(av.t(), g2);
                sink.add(a.0, da.into_dyn().into_shape_with_order(v[a.0].raw_dim()).unwrap());
                sink.add(b.0, db.into_dyn().into_shape_with_order(v[b.0].raw_dim()).unwrap());
            })),
            tracked,
        )
    }

    /// `a (m,k) @ b.T (n,k) -> (m,n)`, used for pairwise similarity matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as_2d(&self.values[a.0]);
        let bv = as_2d(&self.values[b.0]);
        let out = par_gemm(av, bv.t());
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, v, sink| {
                let g2 = as_2d(g);
                let av = as_2d(&v[a.0]);
                let bv = as_2d(&v[b.0]);
                let da = par_gemm(g2, bv);
                let db = par_gemm(g2.t(), av);
                sink.add(a.0, da.into_dyn().into_shape_with_order(v[a.0].raw_dim()).unwrap());
                sink.add(b.0, db.into_dyn().into_shape_with_order(v[b.0].raw_dim()).unwrap());
            })),
            tracked,
        )
    }

    /// Broadcast-add a bias vector over the rows of `a (..., n)`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.values[a.0].shape().last().unwrap();
        assert_eq!(self.values[bias.0].len(), n);
        let mut out = self.values[a.0].clone();
        {
            let rows = out.len() / n;
            let mut flat = out.view_mut().into_shape_with_order((rows, n)).unwrap();
            let bv = self.values[bias.0].view().into_shape_with_order(n).unwrap();
            for mut row in flat.rows_mut() {
                row += &bv;
            }
        }
        let tracked = self.tracked_any(&[a, bias]);
        self.push(
            out,
            Some(Box::new(move |g, v, sink| {
                sink.add(a.0, g.clone());
                let g2 = as_2d(g);
                let db = g2.sum_axis(Axis(0));
                sink.add(
                    bias.0,
                    db.into_dyn()
                        .into_shape_with_order(v[bias.0].raw_dim())
                        .unwrap(),
                );
            })),
            tracked,
        )
    }

    /// Layer normalization over the last axis with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let n = *self.values[x.0].shape().last().unwrap();
        let rows = self.values[x.0].len() / n;
        let xf = self.values[x.0]
            .view()
            .into_shape_with_order((rows, n))
            .unwrap();
        let gv = self.values[gamma.0].view().into_shape_with_order(n).unwrap();
        let bv = self.values[beta.0].view().into_shape_with_order(n).unwrap();
        let mut out = Array2::<F>::zeros((rows, n));
        let mut xhat = Array2::<F>::zeros((rows, n));
        let mut inv_std = Array1::<F>::zeros(rows);
        let nf = F::from_f64(n as f64);
        for (r, xr) in xf.rows().into_iter().enumerate() {
            let mean = xr.iter().copied().sum::<F>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (c, &v) in xr.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat[(r, c)] = xh;
                out[(r, c)] = xh * gv[c] + bv[c];
            }
        }
        let tracked = self.tracked_any(&[x, gamma, beta]);
        let shape = self.values[x.0].raw_dim();
        self.push(
            out.into_dyn().into_shape_with_order(shape.clone()).unwrap(),
            Some(Box::new(move |g, v, sink| {
                let g2 = as_2d(g);
                let gv = v[gamma.0].view().into_shape_with_order(n).unwrap();
                let mut dx = Array2::<F>::zeros((rows, n));
                let mut dgamma = Array1::<F>::zeros(n);
                let mut dbeta = Array1::<F>::zeros(n);
                let nf = F::from_f64(n as f64);
                for r in 0..rows {
                    let gr = g2.row(r);
                    let xh = xhat.row(r);
                    let is = inv_std[r];
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for c in 0..n {
                        let dxh = gr[c] * gv[c];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[c];
                        dgamma[c] = dgamma[c] + gr[c] * xh[c];
                        dbeta[c] = dbeta[c] + gr[c];
                    }
                    let m1 = sum_dxhat / nf;
                    let m2 = sum_dxhat_xhat / nf;
                    for c in 0..n {
                        let dxh = gr[c] * gv[c];
                        dx[(r, c)] = is * (dxh - m1 - xh[c] * m2);
                    }
                }
                sink.add(x.0, dx.into_dyn().into_shape_with_order(v[x.0].raw_dim()).unwrap());
                sink.add(
                    gamma.0,
                    dgamma
                        .into_dyn()
                        .into_shape_with_order(v[gamma.0].raw_dim())
                        .unwrap(),
                );
                sink.add(
                    beta.0,
                    dbeta
                        .into_dyn()
                        .into_shape_with_order(v[beta.0].raw_dim())
                        .unwrap(),
                );
            })),
            tracked,
        )
    }

    /// Row-wise l2 normalization: `y = x / (||x|| + 1e-12)`.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let x2 = as_2d(&self.values[x.0]);
        let (rows, n) = x2.dim();
        let eps = F::from_f64(1e-12);
        let mut out = Array2::<F>::zeros((rows, n));
        let mut norms = Array1::<F>::zeros(rows);
        for (r, xr) in x2.rows().into_iter().enumerate() {
            let s = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms[r] = s;
            let denom = s + eps;
            for (c, &v) in xr.iter().enumerate() {
                out[(r, c)] = v / denom;
            }
        }
        let tracked = self.tracked[x.0];
        let shape = self.values[x.0].raw_dim();
        self.push(
            out.into_dyn().into_shape_with_order(shape).unwrap(),
            Some(Box::new(move |g, v, sink| {
                let g2 = as_2d(g);
                let x2 = as_2d(&v[x.0]);
                let mut dx = Array2::<F>::zeros((rows, n));
                for r in 0..rows {
                    let s = norms[r];
                    let denom = s + eps;
                    let xr = x2.row(r);
                    let gr = g2.row(r);
                    let xg: F = xr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        let mut d = gr[c] / denom;
                        if s > eps {
                            d = d - xr[c] * xg / (s * denom * denom);
                        }
                        dx[(r, c)] = d;
                    }
                }
                sink.add(x.0, dx.into_dyn().into_shape_with_order(v[x.0].raw_dim()).unwrap());
            })),
            tracked,
        )
    }

    /// Fused scaled-dot-product attention over grouped heads.
    ///
    /// `q: (G, Tq, dh)`, `k, v: (G, Tk, dh)`. With `causal`, query `i`
    /// attends keys `j <= i + (Tk - Tq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Var {
        let qs = self.values[q.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        assert_eq!(qs.len(), 3);
        assert_eq!(qs[0], ks[0]);
        assert_eq!(qs[2], ks[2]);
        let (groups, tq, dh) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let offset = tk - tq.min(tk);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let qv = &self.values[q.0];
        let kv = &self.values[k.0];
        let vv = &self.values[v.0];
        let mut out = ArrayD::<F>::zeros(IxDyn(&[groups, tq, dh]));
        let mut probs = ArrayD::<F>::zeros(IxDyn(&[groups, tq, tk]));

        {
            let q3 = qv.view().into_shape_with_order((groups, tq, dh)).unwrap();
            let k3 = kv.view().into_shape_with_order((groups, tk, dh)).unwrap();
            let v3 = vv.view().into_shape_with_order((groups, tk, dh)).unwrap();
            let mut o3 = out.view_mut().into_shape_with_order((groups, tq, dh)).unwrap();
            let mut p3 = probs
                .view_mut()
                .into_shape_with_order((groups, tq, tk))
                .unwrap();
            let o_chunks: Vec<_> = o3.outer_iter_mut().collect();
            let p_chunks: Vec<_> = p3.outer_iter_mut().collect();
            o_chunks
                .into_par_iter()
                .zip(p_chunks.into_par_iter())
                .enumerate()
                .for_each(|(g, (mut og, mut pg))| {
                    let qg = q3.index_axis(Axis(0), g);
                    let kg = k3.index_axis(Axis(0), g);
                    let vg = v3.index_axis(Axis(0), g);
                    let mut scores = qg.dot(&kg.t());
                    scores.mapv_inplace(|x| x * scale);
                    if causal {
                        for i in 0..tq {
                            for j in (i + offset + 1)..tk {
                                scores[(i, j)] = F::neg_infinity();
                            }
                        }
                    }
                    for mut row in scores.rows_mut() {
                        softmax_row(&mut row);
                    }
                    og.assign(&scores.dot(&vg));
                    pg.assign(&scores);
                });
        }

        let tracked = self.tracked_any(&[q, k, v]);
        self.push(
            out,
            Some(Box::new(move |g, vals, sink| {
                let g3 = g.view().into_shape_with_order((groups, tq, dh)).unwrap();
                let q3 = vals[q.0].view().into_shape_with_order((groups, tq, dh)).unwrap();
                let k3 = vals[k.0].view().into_shape_with_order((groups, tk, dh)).unwrap();
                let v3 = vals[v.0].view().into_shape_with_order((groups, tk, dh)).unwrap();
                let p3 = probs.view().into_shape_with_order((groups, tq, tk)).unwrap();
                let mut dq = ArrayD::<F>::zeros(IxDyn(&[groups, tq, dh]));
                let mut dk = ArrayD::<F>::zeros(IxDyn(&[groups, tk, dh]));
                let mut dv = ArrayD::<F>::zeros(IxDyn(&[groups, tk, dh]));
                {
                    let mut dq3 = dq.view_mut().into_shape_with_order((groups, tq, dh)).unwrap();
                    let mut dk3 = dk.view_mut().into_shape_with_order((groups, tk, dh)).unwrap();
                    let mut dv3 = dv.view_mut().into_shape_with_order((groups, tk, dh)).unwrap();
                    let dq_chunks: Vec<_> = dq3.outer_iter_mut().collect();
                    let dk_chunks: Vec<_> = dk3.outer_iter_mut().collect();
                    let dv_chunks: Vec<_> = dv3.outer_iter_mut().collect();
                    dq_chunks
                        .into_par_iter()
                        .zip(dk_chunks.into_par_iter().zip(dv_chunks.into_par_iter()))
                        .enumerate()
                        .for_each(|(g, (mut dqg, (mut dkg, mut dvg)))| {
                            let gg = g3.index_axis(Axis(0), g);
                            let pg = p3.index_axis(Axis(0), g);
                            let qg = q3.index_axis(Axis(0), g);
                            let kg = k3.index_axis(Axis(0), g);
                            let vg = v3.index_axis(Axis(0), g);
                            dvg.assign(&pg.t().dot(&gg));
                            let dp = gg.dot(&vg.t()); // (tq, tk)
                            let mut ds = Array2::<F>::zeros((tq, tk));
                            for i in 0..tq {
                                let dot: F = dp
                                    .row(i)
                                    .iter()
                                    .zip(pg.row(i).iter())
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                                for j in 0..tk {
                                    ds[(i, j)] = pg[(i, j)] * (dp[(i, j)] - dot) * scale;
                                }
                            }
                            dqg.assign(&ds.dot(&kg));
                            dkg.assign(&ds.t().dot(&qg));
                        });
                }
                sink.add(q.0, dq);
                sink.add(k.0, dk);
                sink.add(v.0, dv);
            })),
            tracked,
        )
    }

    /// 2-D convolution via im2col. `x: (B, Cin, H, W)`, `w: (Cout, Cin*kh*kw)`,
    /// `bias: (Cout)`. Output `(B, Cout, H', W')`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        ph: usize,
        pw: usize,
    ) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects (B, C, H, W)");
        let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = self.values[w.0].shape()[0];
        assert_eq!(self.values[w.0].shape()[1], cin * kh * kw);
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (wdt + 2 * pw - kw) / stride + 1;

        let x4 = self.values[x.0]
            .view()
            .into_shape_with_order((b, cin, h, wdt))
            .unwrap();
        let cols: Vec<Array2<F>> = (0..b)
            .into_par_iter()
            .map(|bi| im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, ph, pw, ho, wo))
            .collect();

        let w2 = as_2d(&self.values[w.0]).to_owned();
        let bias1 = self.values[bias.0]
            .view()
            .into_shape_with_order(cout)
            .unwrap()
            .to_owned();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, cout, ho, wo]));
        {
            let mut o4 = out
                .view_mut()
                .into_shape_with_order((b, cout, ho, wo))
                .unwrap();
            let o_items: Vec<_> = o4.outer_iter_mut().collect();
            o_items.into_par_iter().enumerate().for_each(|(bi, mut ob)| {
                // (ho*wo, K) @ (K, cout) -> (ho*wo, cout)
                let prod = cols[bi].dot(&w2.t());
                for (pix, row) in prod.rows().into_iter().enumerate() {
                    let (i, j) = (pix / wo, pix % wo);
                    for c in 0..cout {
                        ob[(c, i, j)] = row[c] + bias1[c];
                    }
                }
            });
        }

        let tracked = self.tracked_any(&[x, w, bias]);
        self.push(
            out,
            Some(Box::new(move |g, vals, sink| {
                let g4 = g.view().into_shape_with_order((b, cout, ho, wo)).unwrap();
                let w2 = as_2d(&vals[w.0]);
                // go per image as (ho*wo, cout)
                let gos: Vec<Array2<F>> = (0..b)
                    .map(|bi| {
                        let gb = g4.index_axis(Axis(0), bi);
                        let mut m = Array2::<F>::zeros((ho * wo, cout));
                        for c in 0..cout {
                            for i in 0..ho {
                                for j in 0..wo {
                                    m[(i * wo + j, c)] = gb[(c, i, j)];
                                }
                            }
                        }
                        m
                    })
                    .collect();
                // dx: parallel per image, disjoint outputs
                let dxs: Vec<ArrayD<F>> = (0..b)
                    .into_par_iter()
                    .map(|bi| {
                        let dcol = gos[bi].dot(&w2); // (ho*wo, K)
                        col2im::<F>(&dcol, cin, h, wdt, kh, kw, stride, ph, pw, ho, wo)
                    })
                    .collect();
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, cin, h, wdt]));
                for (bi, d) in dxs.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), bi).assign(&d);
                }
                // dw: per-image partials summed in index order
                let parts: Vec<Array2<F>> = (0..b)
                    .into_par_iter()
                    .map(|bi| gos[bi].t().dot(&cols[bi]))
                    .collect();
                let mut dw = Array2::<F>::zeros((cout, cin * kh * kw));
                for p in &parts {
                    dw += p;
                }
                let mut db = Array1::<F>::zeros(cout);
                for go in &gos {
                    db += &go.sum_axis(Axis(0));
                }
                sink.add(x.0, dx);
                sink.add(
                    w.0,
                    dw.into_dyn().into_shape_with_order(vals[w.0].raw_dim()).unwrap(),
                );
                sink.add(
                    bias.0,
                    db.into_dyn()
                        .into_shape_with_order(vals[bias.0].raw_dim())
                        .unwrap(),
                );
            })),
            tracked,
        )
    }

    /// Mean-pool chosen token rows of chosen batch items.
    ///
    /// `x: (B, d, c)`; each set `(item, token_indices)` yields one pooled row.
    pub fn pool_sets(&mut self, x: Var, sets: &[(usize, Vec<usize>)]) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (d, c) = (xs[1], xs[2]);
        let x3 = self.values[x.0]
            .view()
            .into_shape_with_order((xs[0], d, c))
            .unwrap();
        let mut out = Array2::<F>::zeros((sets.len(), c));
        for (s, (bi, idxs)) in sets.iter().enumerate() {
            let inv = F::from_f64(1.0 / idxs.len() as f64);
            for &t in idxs {
                for ci in 0..c {
                    out[(s, ci)] = out[(s, ci)] + x3[(*bi, t, ci)] * inv;
                }
            }
        }
        let tracked = self.tracked[x.0];
        let sets: Vec<(usize, Vec<usize>)> = sets.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, vals, sink| {
                let g2 = as_2d(g);
                let mut dx = ArrayD::<F>::zeros(vals[x.0].raw_dim());
                {
                    let mut d3 = dx
                        .view_mut()
                        .into_shape_with_order((xs[0], d, c))
                        .unwrap();
                    for (s, (bi, idxs)) in sets.iter().enumerate() {
                        let inv = F::from_f64(1.0 / idxs.len() as f64);
                        for &t in idxs {
                            for ci in 0..c {
                                d3[(*bi, t, ci)] = d3[(*bi, t, ci)] + g2[(s, ci)] * inv;
                            }
                        }
                    }
                }
                sink.add(x.0, dx);
            })),
            tracked,
        )
    }
}

fn softmax_row<F: Scalar>(row: &mut ndarray::ArrayViewMut1<F>) {
    let mut m = F::neg_infinity();
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn logsumexp_row<F: Scalar>(row: &ndarray::ArrayView1<F>) -> F {
    let mut m = F::neg_infinity();
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    if m == F::neg_infinity() {
        return m;
    }
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    img: &ndarray::ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (cin, h, w) = img.dim();
    let mut col = Array2::<F>::zeros((ho * wo, cin * kh * kw));
    for i in 0..ho {
        for j in 0..wo {
            let row = i * wo + j;
            let mut k = 0usize;
            for c in 0..cin {
                for di in 0..kh {
                    for dj in 0..kw {
                        let yi = (i * stride + di) as isize - ph as isize;
                        let xj = (j * stride + dj) as isize - pw as isize;
                        if yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w {
                            col[(row, k)] = img[(c, yi as usize, xj as usize)];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<F> {
    let mut img = ArrayD::<F>::zeros(IxDyn(&[cin, h, w]));
    for i in 0..ho {
        for j in 0..wo {
            let row = i * wo + j;
            let mut k = 0usize;
            for c in 0..cin {
                for di in 0..kh {
                    for dj in 0..kw {
                        let yi = (i * stride + di) as isize - ph as isize;
                        let xj = (j * stride + dj) as isize - pw as isize;
                        if yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w {
                            img[[c, yi as usize, xj as usize]] =
                                img[[c, yi as usize, xj as usize]] + dcol[(row, k)];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    img
}

/// Central finite differences of a scalar-valued function of a flat vector.
pub fn finite_diff_grad<G>(f: G, point: &[f64], eps: f64) -> Vec<f64>
where
    G: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + eps;
        let fp = f(&p);
        p[i] = point[i] - eps;
        let fm = f(&p);
        p[i] = point[i];
        grads.push((fp - fm) / (2.0 * eps));
    }
    grads
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-4);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Gradient-check a graph builder against central differences on every input.
    fn check<B>(build: B, inputs: &[ArrayD<f64>], tol: f64)
    where
        B: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        for (i, x) in inputs.iter().enumerate() {
            let flat: Vec<f64> = x.iter().copied().collect();
            let f = |p: &[f64]| {
                let mut t = Tape::<f64>::new();
                let mut vs = Vec::new();
                for (j, inp) in inputs.iter().enumerate() {
                    if j == i {
                        let arr = ArrayD::from_shape_vec(inp.raw_dim(), p.to_vec()).unwrap();
                        vs.push(t.leaf(arr));
                    } else {
                        vs.push(t.leaf(inp.clone()));
                    }
                }
                let l = build(&mut t, &vs);
                t.value(l)[[]]
            };
            let numeric = finite_diff_grad(f, &flat, 1e-5);
            let analytic: Vec<f64> = grads
                .get(vars[i])
                .map(|g| g.iter().copied().collect())
                .unwrap_or_else(|| vec![0.0; flat.len()]);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < tol, "input {i}: rel err {err} >= {tol}");
        }
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| f64::sample_normal(rng))
    }

    #[test]
    fn pointwise_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_arr(&[3, 4], &mut rng);
        let b = rand_arr(&[3, 4], &mut rng).mapv(|x| x.abs() + 0.5);
        check(
            |t, vs| {
                let m = t.mul(vs[0], vs[1]);
                let d = t.div(vs[0], vs[1]);
                let s = t.add(m, d);
                let e = t.tanh(s);
                let r = t.relu(e);
                t.sum_all(r)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn exp_ln_sqrt_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_arr(&[5], &mut rng).mapv(|x| x.abs() + 0.7);
        check(
            |t, vs| {
                let e = t.exp(vs[0]);
                let l = t.ln(vs[0]);
                let q = t.sqrt(vs[0]);
                let s1 = t.add(e, l);
                let s2 = t.add(s1, q);
                t.mean_all(s2)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_arr(&[4, 3], &mut rng);
        let b = rand_arr(&[3, 5], &mut rng);
        check(
            |t, vs| {
                let m = t.matmul(vs[0], vs[1]);
                let s = t.tanh(m);
                t.sum_all(s)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_shared_input_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let z = rand_arr(&[4, 3], &mut rng);
        check(
            |t, vs| {
                let s = t.matmul_nt(vs[0], vs[0]);
                let e = t.tanh(s);
                t.sum_all(e)
            },
            &[z],
            1e-6,
        );
    }

    #[test]
    fn softmax_logsumexp_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = rand_arr(&[3, 6], &mut rng);
        check(
            |t, vs| {
                let sm = t.softmax_last(vs[0]);
                let lsm = t.log_softmax_last(vs[0]);
                let lse = t.logsumexp_last(vs[0]);
                let s1 = t.sum_all(sm);
                let s2 = t.sum_all(lsm);
                let s3 = t.sum_all(lse);
                let mut s = t.add(s1, s2);
                s = t.add(s, s3);
                t.scale(s, 0.5)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand_arr(&[4, 8], &mut rng);
        let gamma = rand_arr(&[8], &mut rng).mapv(|v| v * 0.1 + 1.0);
        let beta = rand_arr(&[8], &mut rng);
        check(
            |t, vs| {
                let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn normalize_rows_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_arr(&[5, 4], &mut rng);
        check(
            |t, vs| {
                let y = t.normalize_rows(vs[0]);
                let w = t.mul(y, y);
                t.sum_all(w)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = rand_arr(&[6, 9], &mut rng);
        let mut t = Tape::<f64>::new();
        let v = t.leaf(x);
        let y = t.normalize_rows(v);
        for row in as_2d(t.value(y)).rows() {
            let n: f64 = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_grads_causal_and_cross() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for &(tq, tk, causal) in &[(4usize, 4usize, true), (3, 5, false), (3, 5, true)] {
            let q = rand_arr(&[2, tq, 3], &mut rng);
            let k = rand_arr(&[2, tk, 3], &mut rng);
            let v = rand_arr(&[2, tk, 3], &mut rng);
            check(
                |t, vs| {
                    let o = t.attention(vs[0], vs[1], vs[2], causal);
                    let o = t.tanh(o);
                    t.sum_all(o)
                },
                &[q, k, v],
                1e-5,
            );
        }
    }

    #[test]
    fn attention_causal_masks_future() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let q = rand_arr(&[1, 4, 3], &mut rng);
        let k = rand_arr(&[1, 4, 3], &mut rng);
        let v = rand_arr(&[1, 4, 3], &mut rng);
        let mut t = Tape::<f64>::new();
        let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
        let o = t.attention(qv, kv, vv, true);
        let base = t.value(o).clone();

        // perturb key/value at position 3; outputs at earlier positions must not move
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2[[0, 3, 1]] += 10.0;
        v2[[0, 3, 0]] -= 7.0;
        let mut t2 = Tape::<f64>::new();
        let (qv, kv, vv) = (t2.leaf(q), t2.leaf(k2), t2.leaf(v2));
        let o2 = t2.attention(qv, kv, vv, true);
        let pert = t2.value(o2).clone();
        for i in 0..3 {
            for c in 0..3 {
                assert_eq!(base[[0, i, c]], pert[[0, i, c]]);
            }
        }
        assert_ne!(base[[0, 3, 0]], pert[[0, 3, 0]]);
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = rand_arr(&[2, 2, 5, 5], &mut rng);
        let w = rand_arr(&[3, 2 * 3 * 3], &mut rng).mapv(|v| v * 0.3);
        let b = rand_arr(&[3], &mut rng);
        check(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], vs[2], 3, 3, 2, 1, 1);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // direct nested-loop conv as an independent reference
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = rand_arr(&[1, 2, 6, 6], &mut rng);
        let w = rand_arr(&[3, 2 * 3 * 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);
        let (stride, pad) = (2usize, 1usize);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv2d(xv, wv, bv, 3, 3, stride, pad, pad);
        let got = t.value(y);

        let ho = (6 + 2 * pad - 3) / stride + 1;
        for co in 0..3 {
            for i in 0..ho {
                for j in 0..ho {
                    let mut acc = b[[co]];
                    for ci in 0..2 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let yi = (i * stride + di) as isize - pad as isize;
                                let xj = (j * stride + dj) as isize - pad as isize;
                                if yi >= 0 && yi < 6 && xj >= 0 && xj < 6 {
                                    acc += x[[0, ci, yi as usize, xj as usize]]
                                        * w[[co, ci * 9 + di * 3 + dj]];
                                }
                            }
                        }
                    }
                    assert!((got[[0, co, i, j]] - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gather_concat_narrow_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a = rand_arr(&[5, 3], &mut rng);
        let b = rand_arr(&[2, 3], &mut rng);
        check(
            |t, vs| {
                let g = t.index_select(vs[0], &[0, 2, 2, 4]);
                let cat = t.concat(0, &[g, vs[1]]);
                let sl = t.narrow(cat, 0, 1, 4);
                let sq = t.mul(sl, sl);
                t.sum_all(sq)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn pool_sets_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = rand_arr(&[3, 4, 2], &mut rng);
        let sets = vec![(0usize, vec![0, 2]), (1, vec![3]), (2, vec![1, 1, 2])];
        check(
            move |t, vs| {
                let p = t.pool_sets(vs[0], &sets);
                let p = t.tanh(p);
                t.sum_all(p)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn reductions_and_bias_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let a = rand_arr(&[3, 4, 5], &mut rng);
        let bias = rand_arr(&[5], &mut rng);
        check(
            |t, vs| {
                let wb = t.add_bias(vs[0], vs[1]);
                let m = t.mean_axis(wb, 1);
                let s = t.sum_axis(m, 0);
                let sq = t.mul(s, s);
                t.mean_all(sq)
            },
            &[a, bias],
            1e-6,
        );
    }

    #[test]
    fn permute_reshape_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let a = rand_arr(&[2, 3, 4], &mut rng);
        check(
            |t, vs| {
                let p = t.permute(vs[0], &[2, 0, 1]);
                let r = t.reshape(p, &[4, 6]);
                let s = t.mul(r, r);
                t.sum_all(s)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn max_scalar_floor() {
        let a = arr1(&[-2.0, 0.5, 3.0]).into_dyn();
        let mut t = Tape::<f64>::new();
        let v = t.leaf(a);
        let y = t.max_scalar(v, 0.0);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(t.value(y).as_slice().unwrap(), &[0.0, 0.5, 3.0]);
        assert_eq!(g.get(v).unwrap().as_slice().unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn par_gemm_matches_dot_any_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for &(m, k, n) in &[(3usize, 4usize, 2usize), (300, 17, 9)] {
            let a = Array2::from_shape_fn((m, k), |_| f64::sample_normal(&mut rng));
            let b = Array2::from_shape_fn((k, n), |_| f64::sample_normal(&mut rng));
            let c1 = par_gemm(a.view(), b.view());
            let c2 = a.dot(&b);
            assert!(c1.iter().zip(c2.iter()).all(|(x, y)| (x - y).abs() == 0.0));
        }
    }

    #[test]
    fn untracked_constants_get_no_grad() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let c = t.constant(arr2(&[[3.0, 4.0]]).into_dyn());
        let m = t.mul(a, c);
        let s = t.sum_all(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[3.0, 4.0]);
    }
}
