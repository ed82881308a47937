//! Parameter storage and the layer vocabulary shared by the encoders and
//! the decoder: linear, layer norm, strided conv, multi-head attention,
//! pre-norm transformer blocks, sinusoidal positions.

use crate::autodiff::{Scalar, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

/// Flat, name-indexed store of all learnable arrays of a model.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> PId {
        self.names.push(name.into());
        self.values.push(value);
        PId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: PId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: PId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.values.len()).map(PId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// A tape with every parameter bound as a differentiable leaf.
pub struct Session<F: Scalar> {
    pub tape: Tape<F>,
    pvars: Vec<Var>,
}

impl<F: Scalar> Session<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let mut tape = Tape::new();
        let pvars = params
            .values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect();
        Session { tape, pvars }
    }

    pub fn var(&self, id: PId) -> Var {
        self.pvars[id.0]
    }

    /// Tape length right after parameter binding; see [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.tape.len()
    }

    pub fn rewind(&mut self, mark: usize) {
        self.tape.truncate(mark);
    }
}

// ---- initializers -------------------------------------------------------

pub fn xavier_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> ArrayD<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        F::sample_uniform(rng, -limit, limit)
    })
}

pub fn he_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z = F::sample_normal(rng);
        z * F::from_f64(std)
    })
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::ones(IxDyn(shape))
}

// ---- layers ---------------------------------------------------------------

/// Dense layer `y = x @ w + b` applied over the last axis.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier_uniform(rng, din, dout));
        let b = ps.add(format!("{name}.b"), zeros(&[dout]));
        Linear { w, b }
    }

    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let in_shape = s.tape.value(x).shape().to_vec();
        let dout = s.tape.value(s.var(self.w)).shape()[1];
        let y = s.tape.matmul(x, s.var(self.w));
        let y = s.tape.add_bias(y, s.var(self.b));
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = dout;
        s.tape.reshape(y, &out_shape)
    }
}

/// Learned gain/shift layer norm over the last axis.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: PId,
    pub beta: PId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ones(&[dim]));
        let beta = ps.add(format!("{name}.beta"), zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let eps = F::from_f64(1e-5);
        s.tape
            .layer_norm(x, s.var(self.gamma), s.var(self.beta), eps)
    }
}

/// Strided convolution with channel-wise norm + ReLU.
pub struct ConvLayer {
    pub w: PId,
    pub b: PId,
    pub norm: LayerNorm,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.add(format!("{name}.w"), he_normal(rng, &[cout, fan_in], fan_in));
        let b = ps.add(format!("{name}.b"), zeros(&[cout]));
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), cout);
        ConvLayer {
            w,
            b,
            norm,
            k,
            stride,
            pad: k / 2,
        }
    }

    /// `x: (B, Cin, H, W) -> (B, Cout, H', W')`, norm over channels, ReLU.
    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let y = s.tape.conv2d(
            x,
            s.var(self.w),
            s.var(self.b),
            self.k,
            self.k,
            self.stride,
            self.pad,
            self.pad,
        );
        let shape = s.tape.value(y).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        // channel norm: move C last, normalize, move back
        let t = s.tape.permute(y, &[0, 2, 3, 1]);
        let t = self.norm.apply(s, t);
        let t = s.tape.relu(t);
        let t = s.tape.permute(t, &[0, 3, 1, 2]);
        s.tape.reshape(t, &[b, c, h, w])
    }
}

/// Multi-head attention with separate query and key/value inputs.
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        c: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(c % heads, 0, "channel width must divide into heads");
        Mha {
            wq: Linear::new(ps, &format!("{name}.wq"), c, c, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), c, c, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), c, c, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), c, c, rng),
            heads,
        }
    }

    /// `q_in: (B, Tq, c)`, `kv_in: (B, Tk, c)` -> `(B, Tq, c)`.
    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, q_in: Var, kv_in: Var, causal: bool) -> Var {
        let qs = s.tape.value(q_in).shape().to_vec();
        let ks = s.tape.value(kv_in).shape().to_vec();
        let (b, tq, c) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let h = self.heads;
        let dh = c / h;

        let split = |s: &mut Session<F>, x: Var, t: usize| {
            let x = s.tape.reshape(x, &[b, t, h, dh]);
            let x = s.tape.permute(x, &[0, 2, 1, 3]);
            s.tape.reshape(x, &[b * h, t, dh])
        };

        let q = self.wq.apply(s, q_in);
        let k = self.wk.apply(s, kv_in);
        let v = self.wv.apply(s, kv_in);
        let q = split(s, q, tq);
        let k = split(s, k, tk);
        let v = split(s, v, tk);

        let o = s.tape.attention(q, k, v, causal);
        let o = s.tape.reshape(o, &[b, h, tq, dh]);
        let o = s.tape.permute(o, &[0, 2, 1, 3]);
        let o = s.tape.reshape(o, &[b, tq, c]);
        self.wo.apply(s, o)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention,
/// position-wise feed-forward, all with residual connections.
pub struct Block {
    pub ln_self: LayerNorm,
    pub attn: Mha,
    pub cross: Option<(LayerNorm, Mha)>,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        c: usize,
        heads: usize,
        ffn_mult: usize,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = c * ffn_mult;
        Block {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), c),
            attn: Mha::new(ps, &format!("{name}.self"), c, heads, rng),
            cross: if with_cross {
                Some((
                    LayerNorm::new(ps, &format!("{name}.ln_cross"), c),
                    Mha::new(ps, &format!("{name}.cross"), c, heads, rng),
                ))
            } else {
                None
            },
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), c),
            ff1: Linear::new(ps, &format!("{name}.ff1"), c, hidden, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), hidden, c, rng),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        s: &mut Session<F>,
        x: Var,
        cross_kv: Option<Var>,
        causal: bool,
    ) -> Var {
        let n = self.ln_self.apply(s, x);
        let a = self.attn.apply(s, n, n, causal);
        let mut x = s.tape.add(x, a);
        if let Some((ln, mha)) = &self.cross {
            let kv = cross_kv.expect("block built with cross-attention needs kv input");
            let n = ln.apply(s, x);
            let a = mha.apply(s, n, kv, false);
            x = s.tape.add(x, a);
        }
        let n = self.ln_ff.apply(s, x);
        let h = self.ff1.apply(s, n);
        let h = s.tape.relu(h);
        let h = self.ff2.apply(s, h);
        s.tape.add(x, h)
    }
}

/// Sinusoidal positional table, `(len, c)`.
pub fn sinusoidal_pe<F: Scalar>(len: usize, c: usize) -> Array2<F> {
    let mut pe = Array2::<F>::zeros((len, c));
    for pos in 0..len {
        for i in 0..c / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / c as f64);
            pe[(pos, 2 * i)] = F::from_f64(rate.sin());
            pe[(pos, 2 * i + 1)] = F::from_f64(rate.cos());
        }
    }
    pe
}

/// Add positions to `(B, T, c)` tokens.
pub fn add_positions<F: Scalar>(s: &mut Session<F>, x: Var) -> Var {
    let shape = s.tape.value(x).shape().to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let pe = sinusoidal_pe::<F>(t, c);
    let full = pe.broadcast((b, t, c)).unwrap().to_owned().into_dyn();
    let pv = s.tape.constant(full);
    s.tape.add(x, pv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_err};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "l", 4, 7, &mut rng);
        let mut s = Session::new(&ps);
        let x = s.tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 4])));
        let y = lin.apply(&mut s, x);
        assert_eq!(s.tape.value(y).shape(), &[2, 3, 7]);
    }

    #[test]
    fn block_gradcheck_small() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let block = Block::new(&mut ps, "b", 4, 2, 2, true, &mut rng);

        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4]), |_| f64::sample_normal(&mut rng));
        let kv0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4]), |_| f64::sample_normal(&mut rng));

        let run = |ps: &ParamStore<f64>, x: &ArrayD<f64>, kv: &ArrayD<f64>| {
            let mut s = Session::new(ps);
            let xv = s.tape.leaf(x.clone());
            let kvv = s.tape.leaf(kv.clone());
            let y = block.apply(&mut s, xv, Some(kvv), true);
            let l = s.tape.sum_all(y);
            (s, xv, kvv, l)
        };

        let (s, xv, _kvv, l) = run(&ps, &x0, &kv0);
        let grads = s.tape.backward(l);
        let analytic: Vec<f64> = grads.get(xv).unwrap().iter().copied().collect();

        let flat: Vec<f64> = x0.iter().copied().collect();
        let numeric = finite_diff_grad(
            |p| {
                let xa = ArrayD::from_shape_vec(IxDyn(&[1, 3, 4]), p.to_vec()).unwrap();
                let (s, _, _, l) = run(&ps, &xa, &kv0);
                s.tape.value(l)[[]]
            },
            &flat,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "block input grad rel err {err}");

        // and one weight tensor, through the whole block
        let wid = block.attn.wq.w;
        let wa: Vec<f64> = grads.get(s.var(wid)).unwrap().iter().copied().collect();
        let wflat: Vec<f64> = ps.value(wid).iter().copied().collect();
        let shape = ps.value(wid).raw_dim();
        let numeric_w = finite_diff_grad(
            |p| {
                let mut ps2 = ParamStore::<f64>::new();
                for (name, v) in ps.iter() {
                    ps2.add(name, v.clone());
                }
                *ps2.value_mut(wid) = ArrayD::from_shape_vec(shape.clone(), p.to_vec()).unwrap();
                let (s, _, _, l) = run(&ps2, &x0, &kv0);
                s.tape.value(l)[[]]
            },
            &wflat,
            1e-5,
        );
        let werr = max_rel_err(&wa, &numeric_w);
        assert!(werr < 1e-4, "block weight grad rel err {werr}");
    }

    #[test]
    fn positions_break_permutation_equivariance() {
        // without positions a permutation of tokens permutes outputs;
        // adding the table must break that
        let pe = sinusoidal_pe::<f64>(6, 8);
        assert_ne!(pe.row(0), pe.row(3));
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let block = Block::new(&mut ps, "b", 8, 2, 2, false, &mut rng);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 4, 8]), |_| f64::sample_normal(&mut rng));
        let mut xp = x.clone();
        for c in 0..8 {
            xp[[0, 0, c]] = x[[0, 1, c]];
            xp[[0, 1, c]] = x[[0, 0, c]];
        }
        let fwd = |inp: &ArrayD<f64>| {
            let mut s = Session::new(&ps);
            let v = s.tape.leaf(inp.clone());
            let v = add_positions(&mut s, v);
            let y = block.apply(&mut s, v, None, false);
            s.tape.value(y).clone()
        };
        let y = fwd(&x);
        let yp = fwd(&xp);
        // permuted-input output at position 0 must differ from original position 1
        let mut differs = false;
        for c in 0..8 {
            if (yp[[0, 0, c]] - y[[0, 1, c]]).abs() > 1e-9 {
                differs = true;
            }
        }
        assert!(differs, "positional encoding failed to break equivariance");
    }

    #[test]
    fn session_rewind_drops_activations() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "l", 3, 3, &mut rng);
        let mut s = Session::new(&ps);
        let mark = s.mark();
        for _ in 0..5 {
            s.rewind(mark);
            let x = s.tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
            let _ = lin.apply(&mut s, x);
        }
        assert!(s.tape.len() <= mark + 4);
    }
}
