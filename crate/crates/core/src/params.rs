//! Named parameter storage and PyTorch-style default initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// All trainable tensors, keyed by dotted module path, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Mat<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat<F>] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Replace every tensor from `other`, requiring identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter sets differ".into()));
        }
        for (i, (dst, src)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if dst.dim() != src.dim() {
                return Err(Error::Shape(format!(
                    "{}: shape {:?} vs {:?}",
                    self.names[i],
                    dst.dim(),
                    src.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Binds parameter slots into a graph at most once per forward pass.
pub struct Binder<'a, F: Real> {
    store: &'a ParamStore<F>,
    vars: Vec<Option<Var>>,
}

impl<'a, F: Real> Binder<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, g: &mut Graph<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.param(id.0, self.store.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }
}

/// Deterministic initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<F: Real>(&mut self, rows: usize, cols: usize, bound: f64) -> Mat<F> {
        Mat::from_shape_fn((rows, cols), |_| {
            F::from_f64_lossy(self.rng.random_range(-bound..=bound))
        })
    }

    pub fn normal<F: Real>(&mut self, rows: usize, cols: usize) -> Mat<F> {
        Mat::from_shape_fn((rows, cols), |_| F::from_f64_lossy(self.rng.sample(StandardNormal)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias uniform in ±1/√d_in.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform(d_in, d_out, bound));
        let bias = store.add(format!("{name}.bias"), init.uniform(1, d_out, bound));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<F>, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}
