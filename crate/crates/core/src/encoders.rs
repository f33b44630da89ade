//! Instance-level visual and textual encoders.
//!
//! Both branches end in the same attention pooling: the mean of the fragment
//! vectors is the query, fragments are keys and values, and the pooled vector
//! is `Σ softmax(mean · v_i) v_i`.

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, Linear, ParamId, ParamStore};
use crate::real::{lit, Real};
use crate::vocab::{TokenSequence, PAD_ID};

/// Pool the rows of `x` (K × D) into one 1 × D vector. Logits are divided by
/// `temperature` (1.0 leaves them unscaled). Returns `(pooled, weights)` with
/// weights shaped 1 × K.
pub fn attention_pool<F: Real>(g: &mut Graph<F>, x: Var, temperature: F) -> (Var, Var) {
    let query = g.mean_rows(x);
    let qt = g.transpose(query);
    let logits = g.matmul(x, qt);
    let logits = if temperature == F::one() {
        logits
    } else {
        g.scale(logits, F::one() / temperature)
    };
    let logits = g.transpose(logits);
    let alpha = g.softmax_rows(logits);
    let pooled = g.matmul(alpha, x);
    (pooled, alpha)
}

/// Output of a batched encoder pass.
pub struct EncodedBatch {
    /// B × D_v instance embeddings.
    pub instances: Var,
    /// Per-sample 1 × K (or 1 × N) attention weights.
    pub attention: Vec<Var>,
    /// Per-sample fragment states after projection (K × D_v or N × D_v).
    pub fragments: Vec<Var>,
}

/// Region projection followed by attention pooling.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub proj: Linear,
    pub temperature: f64,
}

impl VisualEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        d_region: usize,
        d_v: usize,
        temperature: f64,
    ) -> Self {
        Self {
            proj: Linear::new(store, init, "visual.proj", d_region, d_v),
            temperature,
        }
    }

    /// `stacked` holds every sample's regions back to back; `counts` gives K per sample.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<F>,
        stacked: Var,
        counts: &[usize],
    ) -> EncodedBatch {
        let projected = self.proj.forward(g, p, stacked);
        let mut pooled = Vec::with_capacity(counts.len());
        let mut attention = Vec::with_capacity(counts.len());
        let mut fragments = Vec::with_capacity(counts.len());
        let mut start = 0;
        for &k in counts {
            let rows = if counts.len() == 1 {
                projected
            } else {
                g.gather_rows(projected, (start..start + k).collect())
            };
            let (v, a) = attention_pool(g, rows, lit(self.temperature));
            pooled.push(v);
            attention.push(a);
            fragments.push(rows);
            start += k;
        }
        EncodedBatch {
            instances: concat_or_single(g, &pooled),
            attention,
            fragments,
        }
    }

    /// Single-image convenience pass: `(V^D, α)`.
    pub fn pool_regions<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &Array2<F>,
    ) -> Result<(Array1<F>, Array1<F>)> {
        check_regions(features)?;
        let mut g = Graph::new();
        let mut p = Binder::new(store);
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, &mut p, x, &[features.nrows()]);
        let v = g.value(out.instances).row(0).to_owned();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite pooled visual embedding".into()));
        }
        Ok((v, g.value(out.attention[0]).row(0).to_owned()))
    }
}

pub(crate) fn check_regions<F: Real>(features: &Array2<F>) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Input("region set must have K >= 1".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite region feature".into()));
    }
    Ok(())
}

fn concat_or_single<F: Real>(g: &mut Graph<F>, rows: &[Var]) -> Var {
    if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(rows)
    }
}

/// GRU cell with PyTorch gate layout `[reset | update | new]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), init.uniform(d_in, 3 * hidden, bound)),
            w_hh: store.add(format!("{name}.w_hh"), init.uniform(hidden, 3 * hidden, bound)),
            b_ih: store.add(format!("{name}.b_ih"), init.uniform(1, 3 * hidden, bound)),
            b_hh: store.add(format!("{name}.b_hh"), init.uniform(1, 3 * hidden, bound)),
            hidden,
        }
    }

    /// One step given the precomputed input projection `gi = x·W_ih + b_ih`.
    fn step<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<F>, gi: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_hh = p.var(g, self.w_hh);
        let b_hh = p.var(g, self.b_hh);
        let hw = g.matmul(h, w_hh);
        let gh = g.add_row(hw, b_hh);
        let gate = |g: &mut Graph<F>, k: usize| {
            let a = g.slice_cols(gi, k * hd, hd);
            let b = g.slice_cols(gh, k * hd, hd);
            (a, b)
        };
        let (ir, hr) = gate(g, 0);
        let (iz, hz) = gate(g, 1);
        let (in_, hn) = gate(g, 2);
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rhn = g.mul(r, hn);
        let n = g.add(in_, rhn);
        let n = g.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

/// Word embedding, bidirectional GRU and attention pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub forward_cell: GruCell,
    /// `None` ties the backward direction to the forward weights.
    pub backward_cell: Option<GruCell>,
    pub vocab_size: usize,
    pub temperature: f64,
}

impl TextEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        vocab_size: usize,
        d_word: usize,
        d_v: usize,
        temperature: f64,
        tied: bool,
    ) -> Self {
        let embed = store.add("text.embed", init.normal(vocab_size, d_word));
        let forward_cell = GruCell::new(store, init, "text.gru_fwd", d_word, d_v);
        let backward_cell = (!tied).then(|| GruCell::new(store, init, "text.gru_bwd", d_word, d_v));
        Self {
            embed,
            forward_cell,
            backward_cell,
            vocab_size,
            temperature,
        }
    }

    pub fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Input("sentence must have at least one token".into()));
        }
        if let Some(&bad) = seq.0.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Batched pass; `fragments` in the output are the N × D_v word states.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<F>,
        seqs: &[&TokenSequence],
    ) -> Result<EncodedBatch> {
        for s in seqs {
            self.check(s)?;
        }
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let hd = self.forward_cell.hidden;

        // time-major ids: row t·B + j is token t of sentence j
        let ids: Vec<usize> = (0..steps)
            .flat_map(|t| seqs.iter().map(move |s| s.0.get(t).copied().unwrap_or(PAD_ID)))
            .collect();
        let table = p.var(g, self.embed);
        let emb = g.gather_rows(table, ids);

        let project = |g: &mut Graph<F>, p: &mut Binder<F>, cell: &GruCell| {
            let w = p.var(g, cell.w_ih);
            let bias = p.var(g, cell.b_ih);
            let xw = g.matmul(emb, w);
            g.add_row(xw, bias)
        };
        let step_rows = |t: usize| (t * b..(t + 1) * b).collect::<Vec<_>>();

        let fcell = &self.forward_cell;
        let gi_f = project(g, p, fcell);
        let mut h = g.zeros(b, hd);
        let mut fwd = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi = if steps == 1 { gi_f } else { g.gather_rows(gi_f, step_rows(t)) };
            // rows past a sentence's end are never read, so no mask is needed here
            h = fcell.step(g, p, gi, h);
            fwd.push(h);
        }

        let bcell = self.backward_cell.as_ref().unwrap_or(fcell);
        let gi_b = if self.backward_cell.is_some() { project(g, p, bcell) } else { gi_f };
        let mut h = g.zeros(b, hd);
        let mut bwd = vec![h; steps];
        for t in (0..steps).rev() {
            let gi = if steps == 1 { gi_b } else { g.gather_rows(gi_b, step_rows(t)) };
            let next = bcell.step(g, p, gi, h);
            let valid: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
            h = if valid.iter().all(|&v| v) {
                next
            } else {
                // padded rows keep the zero initial state until their last real token
                let mask = Array2::from_shape_fn((b, hd), |(r, _)| if valid[r] { F::one() } else { F::zero() });
                let inv = mask.mapv(|m| F::one() - m);
                let kept = g.mul_const(next, mask);
                let held = g.mul_const(h, inv);
                g.add(kept, held)
            };
            bwd[t] = h;
        }

        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let sum = g.add(fwd[t], bwd[t]);
            per_step.push(g.scale(sum, lit(0.5)));
        }
        let states = concat_or_single(g, &per_step);

        let mut pooled = Vec::with_capacity(b);
        let mut attention = Vec::with_capacity(b);
        let mut fragments = Vec::with_capacity(b);
        for (j, s) in seqs.iter().enumerate() {
            let rows: Vec<usize> = (0..s.len()).map(|t| t * b + j).collect();
            let words = if b == 1 && s.len() == steps { states } else { g.gather_rows(states, rows) };
            let (v, a) = attention_pool(g, words, lit(self.temperature));
            pooled.push(v);
            attention.push(a);
            fragments.push(words);
        }
        Ok(EncodedBatch {
            instances: concat_or_single(g, &pooled),
            attention,
            fragments,
        })
    }

    /// Single-sentence convenience pass: `(word states N × D_v, S^D)`.
    pub fn encode_sentence<F: Real>(
        &self,
        store: &ParamStore<F>,
        tokens: &TokenSequence,
    ) -> Result<(Array2<F>, Array1<F>)> {
        let mut g = Graph::new();
        let mut p = Binder::new(store);
        let out = self.forward(&mut g, &mut p, &[tokens])?;
        let s = g.value(out.instances).row(0).to_owned();
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite textual embedding".into()));
        }
        Ok((g.value(out.fragments[0]).clone(), s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_visual(d: usize) -> (ParamStore<f64>, VisualEncoder) {
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, &mut Init::new(0), d, d, 1.0);
        *store.get_mut(enc.proj.weight) = Array2::eye(d);
        store.get_mut(enc.proj.bias).fill(0.0);
        (store, enc)
    }

    #[test]
    fn identical_rows_pool_uniformly() {
        let (store, enc) = identity_visual(3);
        let x = array![[0.3, -1.0, 2.0], [0.3, -1.0, 2.0], [0.3, -1.0, 2.0], [0.3, -1.0, 2.0]];
        let (v, alpha) = enc.pool_regions(&store, &x).unwrap();
        for a in alpha.iter() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        for (a, b) in v.iter().zip(x.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_is_its_projection() {
        let mut store = ParamStore::<f64>::new();
        let enc = VisualEncoder::new(&mut store, &mut Init::new(5), 4, 3, 1.0);
        let x = array![[0.5, 1.0, -0.25, 2.0]];
        let (v, alpha) = enc.pool_regions(&store, &x).unwrap();
        assert_eq!(alpha.to_vec(), vec![1.0]);
        let expect = x.dot(store.get(enc.proj.weight)) + store.get(enc.proj.bias);
        for (a, b) in v.iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_row_hand_computed_softmax() {
        // v1 = (√2, −1), v2 = (0, 1): mean = (√2/2, 0), mean·v1 = 1, mean·v2 = 0
        let v1 = [2f64.sqrt(), -1.0];
        let v2 = [0.0, 1.0];
        let (store, enc) = identity_visual(2);
        let x = array![[v1[0], v1[1]], [v2[0], v2[1]]];
        let (v, alpha) = enc.pool_regions(&store, &x).unwrap();
        let e = std::f64::consts::E;
        let (a1, a2) = (e / (e + 1.0), 1.0 / (e + 1.0));
        assert!((alpha[0] - a1).abs() < 1e-14 && (alpha[1] - a2).abs() < 1e-14);
        assert!((v[0] - (a1 * v1[0] + a2 * v2[0])).abs() < 1e-14);
        assert!((v[1] - (a1 * v1[1] + a2 * v2[1])).abs() < 1e-14);
    }

    #[test]
    fn permuting_regions_leaves_output_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let enc = VisualEncoder::new(&mut store, &mut Init::new(9), 5, 4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Array2::from_shape_fn((6, 5), |(r, c)| x[[perm[r], c]]);
        let (v, _) = enc.pool_regions(&store, &x).unwrap();
        let (vp, _) = enc.pool_regions(&store, &xp).unwrap();
        for (a, b) in v.iter().zip(vp.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_and_empty_regions_rejected() {
        let (store, enc) = identity_visual(2);
        assert!(matches!(enc.pool_regions(&store, &array![[f64::NAN, 0.0]]), Err(Error::Numeric(_))));
        assert!(enc.pool_regions(&store, &Array2::zeros((0, 2))).is_err());
    }

    fn text(tied: bool) -> (ParamStore<f64>, TextEncoder) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &mut Init::new(3), 12, 4, 5, 1.0, tied);
        (store, enc)
    }

    #[test]
    fn single_word_embedding_is_its_state() {
        let (store, enc) = text(false);
        let (states, s) = enc.encode_sentence(&store, &TokenSequence(vec![7])).unwrap();
        assert_eq!(states.nrows(), 1);
        for (a, b) in s.iter().zip(states.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tied_cells_reverse_symmetry() {
        let (store, enc) = text(true);
        let seq = vec![2, 5, 9, 3, 11];
        let rev: Vec<usize> = seq.iter().rev().copied().collect();
        let (a, _) = enc.encode_sentence(&store, &TokenSequence(seq.clone())).unwrap();
        let (b, _) = enc.encode_sentence(&store, &TokenSequence(rev)).unwrap();
        let n = seq.len();
        for j in 0..n {
            for c in 0..a.ncols() {
                assert!((a[[j, c]] - b[[n - 1 - j, c]]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn batched_padding_matches_individual_passes() {
        let (store, enc) = text(false);
        let s1 = TokenSequence(vec![2, 3, 4, 5]);
        let s2 = TokenSequence(vec![6, 7]);
        let mut g = Graph::new();
        let mut p = Binder::new(&store);
        let out = enc.forward(&mut g, &mut p, &[&s1, &s2]).unwrap();
        for (j, s) in [&s1, &s2].iter().enumerate() {
            let (states, emb) = enc.encode_sentence(&store, s).unwrap();
            let got = g.value(out.fragments[j]);
            assert!((got - &states).iter().all(|d| d.abs() < 1e-13));
            let row = g.value(out.instances).row(j).to_owned();
            assert!((row - emb).iter().all(|d| d.abs() < 1e-13));
        }
    }

    #[test]
    fn attention_weights_normalized() {
        let (store, enc) = text(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..9);
            let seq = TokenSequence((0..n).map(|_| rng.random_range(0..12)).collect());
            let mut g = Graph::new();
            let mut p = Binder::new(&store);
            let out = enc.forward(&mut g, &mut p, &[&seq]).unwrap();
            let a = g.value(out.attention[0]);
            assert!(a.iter().all(|&w| w >= 0.0));
            assert!((a.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let (store, enc) = text(false);
        assert!(matches!(
            enc.encode_sentence(&store, &TokenSequence(vec![12])),
            Err(Error::Input(_))
        ));
        assert!(enc.encode_sentence(&store, &TokenSequence(vec![])).is_err());
    }
}
