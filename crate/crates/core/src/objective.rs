//! Fusion, similarity and the joint training objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::registry::Registry;

/// Clamp applied to log arguments.
pub const LOG_EPS: f64 = 1e-12;
/// Tolerance on distribution normalization for the array-level KL.
pub const NORM_TOL: f64 = 1e-4;
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub beta_d: f64,
    pub beta_t: f64,
    pub beta_c: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            beta_d: 0.6,
            beta_t: 0.4,
            beta_c: 0.0,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_d, self.beta_t, self.beta_c];
        if all.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config(format!("fusion weights must be finite and nonnegative, got {all:?}")));
        }
        if all.iter().all(|&b| b == 0.0) {
            return Err(Error::Config("at least one fusion weight must be positive".into()));
        }
        Ok(())
    }

    fn check_concept(&self, has_concept: bool) -> Result<()> {
        self.validate()?;
        if !has_concept && self.beta_c > 0.0 {
            return Err(Error::Config(format!(
                "beta_c = {} but no concept embedding is provided",
                self.beta_c
            )));
        }
        Ok(())
    }
}

/// `β_d·D + β_t·T + β_c·C` on graph values.
pub fn fuse<F: Real>(g: &mut Graph<F>, d: Var, t: Var, c: Option<Var>, w: &FusionWeights) -> Result<Var> {
    w.check_concept(c.is_some())?;
    if g.shape(d) != g.shape(t) || c.is_some_and(|c| g.shape(c) != g.shape(d)) {
        return Err(Error::Shape("fusion inputs must share a shape".into()));
    }
    let mut parts = vec![g.scale(d, F::from_f64_lossy(w.beta_d)), g.scale(t, F::from_f64_lossy(w.beta_t))];
    if let Some(c) = c {
        parts.push(g.scale(c, F::from_f64_lossy(w.beta_c)));
    }
    Ok(g.add_all(&parts))
}

/// Array form of [`fuse`].
pub fn fuse_vectors<F: Real>(
    d: &Array1<F>,
    t: &Array1<F>,
    c: Option<&Array1<F>>,
    w: &FusionWeights,
) -> Result<Array1<F>> {
    w.check_concept(c.is_some())?;
    if d.len() != t.len() || c.is_some_and(|c| c.len() != d.len()) {
        return Err(Error::Shape("fusion inputs must share a dimension".into()));
    }
    let mut out = d * F::from_f64_lossy(w.beta_d) + t * F::from_f64_lossy(w.beta_t);
    if let Some(c) = c {
        out = out + c * F::from_f64_lossy(w.beta_c);
    }
    Ok(out)
}

pub fn cosine_similarity<F: Real>(a: ArrayView1<F>, b: ArrayView1<F>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let to = |x: &F| x.to_f64().unwrap_or(f64::NAN);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().map(to).zip(b.iter().map(to)) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Row-wise cosine similarity matrix `S[i, j] = cos(a_i, b_j)`.
pub fn similarity_matrix<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let bt = g.transpose(bn);
    g.matmul(an, bt)
}

/// Chooses which in-batch negatives contribute to the ranking hinge.
pub trait NegativeMining: Send + Sync {
    fn name(&self) -> &'static str;

    /// `costs[j]` is the hinge argument for candidate `j`; `positive` is the
    /// matched index. Returns the selected negative indices.
    fn select(&self, costs: &[f64], positive: usize) -> Vec<usize>;
}

pub struct SumNegatives;

impl NegativeMining for SumNegatives {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn select(&self, costs: &[f64], positive: usize) -> Vec<usize> {
        (0..costs.len()).filter(|&j| j != positive).collect()
    }
}

/// Single highest-cost negative, lowest index on ties.
pub struct HardestNegative;

impl NegativeMining for HardestNegative {
    fn name(&self) -> &'static str {
        "hardest"
    }

    fn select(&self, costs: &[f64], positive: usize) -> Vec<usize> {
        let mut best: Option<usize> = None;
        for j in (0..costs.len()).filter(|&j| j != positive) {
            if best.is_none_or(|b| costs[j] > costs[b]) {
                best = Some(j);
            }
        }
        best.into_iter().collect()
    }
}

pub fn mining_registry() -> Registry<dyn NegativeMining> {
    let mut reg: Registry<dyn NegativeMining> = Registry::new("negative mining");
    reg.register("sum", "sum over all in-batch negatives (default)", |_| Ok(Box::new(SumNegatives)));
    reg.register("hardest", "hardest in-batch negative per query", |_| Ok(Box::new(HardestNegative)));
    reg
}

/// Bidirectional hinge loss over a square similarity matrix whose diagonal
/// holds the matched pairs, with its gradient with respect to `sim`.
pub fn triplet_with_grad(sim: ArrayView2<f64>, margin: f64, mining: &dyn NegativeMining) -> Result<(f64, Array2<f64>)> {
    let (n, m) = sim.dim();
    if n != m {
        return Err(Error::Shape(format!("similarity matrix must be square, got {n}×{m}")));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, n));
    let mut costs = vec![0.0; n];
    // image i against sentences j
    for i in 0..n {
        for j in 0..n {
            costs[j] = margin - sim[[i, i]] + sim[[i, j]];
        }
        for j in mining.select(&costs, i) {
            if costs[j] > 0.0 {
                loss += costs[j];
                grad[[i, i]] -= 1.0;
                grad[[i, j]] += 1.0;
            }
        }
    }
    // sentence j against images i
    for j in 0..n {
        for i in 0..n {
            costs[i] = margin - sim[[j, j]] + sim[[i, j]];
        }
        for i in mining.select(&costs, j) {
            if costs[i] > 0.0 {
                loss += costs[i];
                grad[[j, j]] -= 1.0;
                grad[[i, j]] += 1.0;
            }
        }
    }
    Ok((loss, grad))
}

pub fn triplet_loss(sim: ArrayView2<f64>, margin: f64, mining: &dyn NegativeMining) -> Result<f64> {
    triplet_with_grad(sim, margin, mining).map(|(l, _)| l)
}

/// Smallest |hinge argument| over all off-diagonal pairs; gradient checks
/// reject points too close to a kink.
pub fn kink_distance(sim: ArrayView2<f64>, margin: f64) -> f64 {
    let n = sim.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                best = best
                    .min((margin - sim[[i, i]] + sim[[i, j]]).abs())
                    .min((margin - sim[[j, j]] + sim[[i, j]]).abs());
            }
        }
    }
    best
}

fn to_f64<F: Real>(m: &Array2<F>) -> Array2<f64> {
    m.mapv(|v| v.to_f64().unwrap_or(f64::NAN))
}

fn from_f64<F: Real>(m: &Array2<f64>) -> Array2<F> {
    m.mapv(F::from_f64_lossy)
}

/// Graph node for [`triplet_with_grad`].
pub fn triplet_op<F: Real>(g: &mut Graph<F>, sim: Var, margin: f64, mining: &dyn NegativeMining) -> Result<Var> {
    let s = to_f64(g.value(sim));
    let (loss, grad) = triplet_with_grad(s.view(), margin, mining)?;
    Ok(g.scalar_op(sim, F::from_f64_lossy(loss), from_f64(&grad)))
}

/// Σ over rows of KL(p_r ∥ q_r) with `q` clamped at [`LOG_EPS`], and its
/// gradients with respect to `p` and `q`.
pub fn kl_with_grad(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("KL inputs {:?} and {:?}", p.dim(), q.dim())));
    }
    let mut total = 0.0;
    let mut gp = Array2::zeros(p.dim());
    let mut gq = Array2::zeros(q.dim());
    for ((idx, &pv), &qv) in p.indexed_iter().zip(q.iter()) {
        if pv <= 0.0 {
            continue;
        }
        let qc = qv.max(LOG_EPS);
        total += pv * (pv.ln() - qc.ln());
        gp[idx] = pv.ln() - qc.ln() + 1.0;
        if qv > LOG_EPS {
            gq[idx] = -pv / qv;
        }
    }
    Ok((total, gp, gq))
}

pub fn kl_op<F: Real>(g: &mut Graph<F>, p: Var, q: Var) -> Result<Var> {
    let (pv, qv) = (to_f64(g.value(p)), to_f64(g.value(q)));
    let (loss, gp, gq) = kl_with_grad(pv.view(), qv.view())?;
    Ok(g.scalar_op2(p, from_f64(&gp), q, from_f64(&gq), F::from_f64_lossy(loss)))
}

fn check_distribution(p: &Array1<f64>, node: usize, which: &str) -> Result<()> {
    let sum = p.sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > NORM_TOL {
        return Err(Error::Input(format!(
            "{which} distribution at node {node} is not normalized (sum {sum})"
        )));
    }
    Ok(())
}

/// Σ_nodes KL(P^V_t ∥ P^S_t) over per-node distributions.
pub fn kl_alignment(visual: &[Array1<f64>], textual: &[Array1<f64>]) -> Result<f64> {
    if visual.len() != textual.len() {
        return Err(Error::Shape(format!("{} visual vs {} textual nodes", visual.len(), textual.len())));
    }
    let mut total = 0.0;
    for (t, (p, q)) in visual.iter().zip(textual).enumerate() {
        check_distribution(p, t + 1, "visual")?;
        check_distribution(q, t + 1, "textual")?;
        let pv = p.view().insert_axis(ndarray::Axis(0));
        let qv = q.view().insert_axis(ndarray::Axis(0));
        total += kl_with_grad(pv, qv)?.0;
    }
    Ok(total)
}

/// Σ_nodes −ln p_t[z_t] for both modalities against the shared labels.
pub fn node_ce_loss(visual: &[Array1<f64>], textual: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if visual.len() != labels.len() || textual.len() != labels.len() {
        return Err(Error::Shape("one prediction per labelled node is required".into()));
    }
    let mut total = 0.0;
    for preds in [visual, textual] {
        for (t, (p, &z)) in preds.iter().zip(labels).enumerate() {
            let pz = *p.get(z).ok_or_else(|| {
                Error::Input(format!("label {z} at node {} outside dictionary of size {}", t + 1, p.len()))
            })?;
            total -= pz.max(LOG_EPS).ln();
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rank: f64,
    pub ce: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rank: 1.0,
            ce: 1.0,
            kl: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rank: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(rank: f64, ce: f64, kl: f64, w: &LossWeights) -> Self {
        Self {
            rank,
            ce,
            kl,
            total: w.rank * rank + w.ce * ce + w.kl * kl,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("rank", self.rank), ("ce", self.ce), ("kl", self.kl), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Scalar graph terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rank: Var,
    pub ce: Var,
    pub kl: Var,
}

/// Weighted sum of the three terms; zero-weight terms are left out of the graph.
pub fn joint_loss<F: Real>(g: &mut Graph<F>, terms: LossTerms, w: &LossWeights) -> (Var, LossBreakdown) {
    let breakdown = LossBreakdown::compose(
        g.scalar(terms.rank).to_f64().unwrap_or(f64::NAN),
        g.scalar(terms.ce).to_f64().unwrap_or(f64::NAN),
        g.scalar(terms.kl).to_f64().unwrap_or(f64::NAN),
        w,
    );
    let mut parts = Vec::new();
    for (v, wt) in [(terms.rank, w.rank), (terms.ce, w.ce), (terms.kl, w.kl)] {
        if wt != 0.0 {
            parts.push(g.scale(v, F::from_f64_lossy(wt)));
        }
    }
    let total = if parts.is_empty() { g.zeros(1, 1) } else { g.add_all(&parts) };
    (total, breakdown)
}
