//! Adam with bias correction, matching the common framework update.

use ndarray::Array2;

use crate::params::ParamStore;
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F: Real> {
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    pub step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update: `p ← p − (lr / bc1) · m / (√v / √bc2 + eps)`.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Array2<F>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(BETA1), F::from_f64_lossy(BETA2));
        let (one, eps) = (F::one(), F::from_f64_lossy(EPS));
        let step_size = F::from_f64_lossy(lr / bc1);
        let sqrt_bc2 = F::from_f64_lossy(bc2.sqrt());
        for (k, p) in store.values_mut().iter_mut().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let denom = v.sqrt() / sqrt_bc2 + eps;
                *p = *p - step_size * *m / denom;
            });
        }
    }
}
