//! Central finite-difference checks of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{generate_synthetic, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::model::{prepare, ModelConfig, ObjectiveConfig, PreparedSample, SmfeaModel};
use crate::objective::{
    fuse, kink_distance, kl_op, similarity_matrix, triplet_op, FusionWeights, SumNegatives,
};
use crate::params::{Binder, Init, ParamStore};
use crate::registry::Registry;
use crate::vocab::{build_category_dicts, build_word_vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub seed: u64,
    pub d_node: usize,
    pub d_v: usize,
    pub batch: usize,
    /// Entries sampled per parameter block; `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Points closer than this to a hinge kink are resampled.
    pub kink_tol: f64,
    pub max_restarts: usize,
    pub cell_variant: String,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            seed: 0,
            d_node: 8,
            d_v: 16,
            batch: 3,
            max_entries: None,
            kink_tol: 1e-3,
            max_restarts: 50,
            cell_variant: "paper".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub rel_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_block: String,
    pub blocks: Vec<BlockError>,
    /// Sampled points discarded for sitting near a hinge kink.
    pub rejected_kinks: usize,
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, falling back to the absolute error when
/// both norms are below 1e-10.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

type LossFn<'a> = dyn Fn(&ParamStore<f64>) -> Result<(f64, Vec<Array2<f64>>)> + 'a;

/// Compare analytic and central-difference gradients for the selected blocks.
pub fn check_blocks(
    store: &ParamStore<f64>,
    blocks: &[usize],
    loss: &LossFn,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BlockError>> {
    let (_, grads) = loss(store)?;
    let mut work = store.clone();
    let mut out = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let size = store.values()[b].len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < size => sample(rng, size, m).into_vec(),
            _ => (0..size).collect(),
        };
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        let cols = store.values()[b].ncols();
        for &e in &entries {
            let idx = (e / cols, e % cols);
            let orig = work.values()[b][idx];
            work.values_mut()[b][idx] = orig + opts.eps;
            let up = loss(&work)?.0;
            work.values_mut()[b][idx] = orig - opts.eps;
            let down = loss(&work)?.0;
            work.values_mut()[b][idx] = orig;
            numeric.push((up - down) / (2.0 * opts.eps));
            analytic.push(grads[b][idx]);
        }
        out.push(BlockError {
            name: store.name(crate::params::ParamId(b)).to_string(),
            rel_error: relative_error(&analytic, &numeric),
            entries: entries.len(),
        });
    }
    Ok(out)
}

fn report(component: &str, blocks: Vec<BlockError>, rejected_kinks: usize) -> GradcheckReport {
    let worst = blocks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    GradcheckReport {
        component: component.to_string(),
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst_block: worst.map_or_else(String::new, |w| w.name),
        blocks,
        rejected_kinks,
    }
}

/// One gradient-check target.
pub trait GradProbe: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, opts: &GradcheckOptions) -> Result<GradcheckReport>;
}

/// Loss linear in its parameters: `Σ W ⊙ fuse(D, T)` with `W` frozen.
pub struct LinearProbe;

impl GradProbe for LinearProbe {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn run(&self, opts: &GradcheckOptions) -> Result<GradcheckReport> {
        let mut init = Init::new(opts.seed);
        let mut store = ParamStore::<f64>::new();
        store.add("instance", init.normal(opts.batch, opts.d_v));
        store.add("tree", init.normal(opts.batch, opts.d_v));
        let frozen: Array2<f64> = init.normal(opts.batch, opts.d_v);
        let loss = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let mut p = Binder::new(s);
            let d = p.var(&mut g, crate::params::ParamId(0));
            let t = p.var(&mut g, crate::params::ParamId(1));
            let f = fuse(&mut g, d, t, None, &FusionWeights::default())?;
            let w = g.mul_const(f, frozen.clone());
            let root = g.sum_all(w);
            Ok((g.scalar(root), collect(&g, root, s)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let blocks = check_blocks(&store, &[0, 1], &loss, opts, &mut rng)?;
        Ok(report(self.name(), blocks, 0))
    }
}

fn collect(g: &Graph<f64>, root: crate::autodiff::Var, s: &ParamStore<f64>) -> Vec<Array2<f64>> {
    let mut grads: Vec<Array2<f64>> = s.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
    for (slot, gr) in g.backward(root) {
        grads[slot] = gr;
    }
    grads
}

/// Ranking, classification and alignment terms over free embeddings and logits.
pub struct ObjectiveProbe;

impl GradProbe for ObjectiveProbe {
    fn name(&self) -> &'static str {
        "objective"
    }

    fn run(&self, opts: &GradcheckOptions) -> Result<GradcheckReport> {
        let b = opts.batch;
        let mut rejected = 0;
        for attempt in 0..=opts.max_restarts {
            let seed = opts.seed.wrapping_add(attempt as u64);
            let mut init = Init::new(seed);
            let mut store = ParamStore::<f64>::new();
            store.add("fused.visual", init.normal(b, opts.d_v));
            store.add("fused.text", init.normal(b, opts.d_v));
            let sizes: Vec<usize> = (1..=7).map(|t| if t % 2 == 1 { 5 } else { 4 }).collect();
            for (t, &c) in sizes.iter().enumerate() {
                store.add(format!("logits.visual.{}", t + 1), init.normal(b, c));
                store.add(format!("logits.text.{}", t + 1), init.normal(b, c));
            }
            let labels: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&c| (0..b).map(|_| init.rng().random_range(0..c)).collect())
                .collect();
            let loss = |s: &ParamStore<f64>| {
                let mut g = Graph::new();
                let mut p = Binder::new(s);
                let v = p.var(&mut g, crate::params::ParamId(0));
                let t = p.var(&mut g, crate::params::ParamId(1));
                let sim = similarity_matrix(&mut g, v, t);
                let mut terms = vec![triplet_op(&mut g, sim, 0.2, &SumNegatives)?];
                for node in 0..7 {
                    let lv = p.var(&mut g, crate::params::ParamId(2 + 2 * node));
                    let lt = p.var(&mut g, crate::params::ParamId(3 + 2 * node));
                    terms.push(g.cross_entropy(lv, &labels[node]));
                    terms.push(g.cross_entropy(lt, &labels[node]));
                    let (pv, pt) = (g.softmax_rows(lv), g.softmax_rows(lt));
                    terms.push(kl_op(&mut g, pv, pt)?);
                }
                let root = g.add_all(&terms);
                Ok((g.scalar(root), collect(&g, root, s)))
            };
            let sim = {
                let mut g = Graph::new();
                let vv = g.constant(store.values()[0].clone());
                let tv = g.constant(store.values()[1].clone());
                let s = similarity_matrix(&mut g, vv, tv);
                g.value(s).clone()
            };
            if kink_distance(sim.view(), 0.2) < opts.kink_tol {
                rejected += 1;
                continue;
            }
            let all: Vec<usize> = (0..store.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks = check_blocks(&store, &all, &loss, opts, &mut rng)?;
            return Ok(report(self.name(), blocks, rejected));
        }
        Err(crate::Error::Numeric(format!("every sample hit a hinge kink after {rejected} restarts")))
    }
}

/// Full model on a tiny synthetic batch, checking blocks whose names match.
pub struct ModelProbe {
    pub name: &'static str,
    pub prefixes: &'static [&'static str],
}

impl ModelProbe {
    fn fixture(&self, opts: &GradcheckOptions, seed: u64) -> Result<(SmfeaModel<f64>, Vec<PreparedSample>)> {
        let spec = SyntheticSpec {
            n_pairs: opts.batch,
            regions_per_image: 4,
            d_region: 6,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = Dataset { samples: generate_synthetic(&spec)?.samples };
        let vocab = build_word_vocab(ds.sentences(), 1)?;
        let dicts = build_category_dicts(ds.trees());
        let samples = prepare(&ds, &vocab, &dicts)?;
        let cfg = ModelConfig {
            d_region: 6,
            d_word: 5,
            d_v: opts.d_v,
            d_node: opts.d_node,
            vocab_size: vocab.size(),
            n_fragments: dicts.n_fragments(),
            n_relations: dicts.n_relations(),
            temperature: 1.0,
            cell_variant: opts.cell_variant.clone(),
            tied_gru: false,
        };
        Ok((SmfeaModel::new(cfg, seed)?, samples))
    }
}

impl GradProbe for ModelProbe {
    fn name(&self) -> &'static str {
        self.name
    }

    fn run(&self, opts: &GradcheckOptions) -> Result<GradcheckReport> {
        let objective = ObjectiveConfig::default();
        let mut rejected = 0;
        for attempt in 0..=opts.max_restarts {
            let seed = opts.seed.wrapping_add(attempt as u64);
            let (mut model, samples) = self.fixture(opts, seed)?;
            let refs: Vec<&PreparedSample> = samples.iter().collect();
            let sim = {
                let mut g = Graph::new();
                let mut p = Binder::new(&model.store);
                let vars = model.forward_batch(&mut g, &mut p, &refs, &objective.fusion)?;
                let s = similarity_matrix(&mut g, vars.visual_fused, vars.text_fused);
                g.value(s).clone()
            };
            if kink_distance(sim.view(), objective.margin) < opts.kink_tol {
                rejected += 1;
                continue;
            }
            let blocks: Vec<usize> = model
                .store
                .names()
                .iter()
                .enumerate()
                .filter(|(_, n)| self.prefixes.is_empty() || self.prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(i, _)| i)
                .collect();
            let store = std::mem::take(&mut model.store);
            let loss = |s: &ParamStore<f64>| {
                let (mut g, mut p) = (Graph::new(), Binder::new(s));
                let (root, b) = model.batch_loss(&mut g, &mut p, &refs, &objective, &SumNegatives)?;
                Ok((b.total, collect(&g, root, s)))
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errors = check_blocks(&store, &blocks, &loss, opts, &mut rng)?;
            return Ok(report(self.name, errors, rejected));
        }
        Err(crate::Error::Numeric(format!("every sample hit a hinge kink after {rejected} restarts")))
    }
}

pub fn probe_registry() -> Registry<dyn GradProbe> {
    let mut reg: Registry<dyn GradProbe> = Registry::new("gradcheck component");
    reg.register("linear", "fusion under a frozen linear readout", |_| Ok(Box::new(LinearProbe)));
    reg.register("objective", "ranking, node CE and KL over free inputs", |_| Ok(Box::new(ObjectiveProbe)));
    reg.register("encoders", "region and sentence encoder parameters", |_| {
        Ok(Box::new(ModelProbe { name: "encoders", prefixes: &["visual.", "text."] }))
    });
    reg.register("treeenc", "both tree encoders", |_| {
        Ok(Box::new(ModelProbe { name: "treeenc", prefixes: &["vtree.", "ttree."] }))
    });
    reg.register("end2end", "every model parameter", |_| Ok(Box::new(ModelProbe { name: "end2end", prefixes: &[] })));
    reg
}

pub fn gradcheck(component: &str, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    probe_registry().create(component)?.run(opts)
}
