//! Adaptive moment optimizer with global-norm gradient clipping.

use crate::autodiff::{Grads, Scalar};
use crate::nn::{ParamStore, Session};
use ndarray::ArrayD;

/// Adam with bias correction. Moments are kept in the parameter dtype.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
            v: params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    /// Apply one update from the session's gradients. Gradients are first
    /// clipped to global l2 norm `clip` (skipped when `clip <= 0`).
    /// Returns the pre-clip gradient norm.
    pub fn apply(
        &mut self,
        params: &mut ParamStore<F>,
        session: &Session<F>,
        grads: &Grads<F>,
        clip: f64,
    ) -> f64 {
        let ids: Vec<_> = params.ids().collect();
        let mut sq_norm = 0.0f64;
        let grad_arrays: Vec<Option<&ArrayD<F>>> =
            ids.iter().map(|&id| grads.get(session.var(id))).collect();
        for g in grad_arrays.iter().flatten() {
            sq_norm += g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = self.lr * bc2.sqrt() / bc1;

        let b1 = F::from_f64(self.beta1);
        let b1c = F::from_f64(1.0 - self.beta1);
        let b2 = F::from_f64(self.beta2);
        let b2c = F::from_f64(1.0 - self.beta2);
        let eps = F::from_f64(self.eps);
        let lr = F::from_f64(lr_t);
        let gscale = F::from_f64(scale);

        for (i, id) in ids.iter().enumerate() {
            let Some(g) = grad_arrays[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &graw| {
                    let g = graw * gscale;
                    *m = b1 * *m + b1c * g;
                    *v = b2 * *v + b2c * g * g;
                    *p = *p - lr * *m / (v.sqrt() + eps);
                });
        }
        norm
    }

    /// Flat snapshot of optimizer state for checkpointing:
    /// `(step, moment arrays in parameter order)`.
    pub fn state(&self) -> (u64, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
