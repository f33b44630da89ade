//! The full two-branch model: encoders, tree encoders, fusion and loss.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::Dataset;
use crate::encoders::{check_regions, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::objective::{
    fuse, joint_loss, kl_op, mining_registry, similarity_matrix, triplet_op, FusionWeights, LossBreakdown,
    LossTerms, LossWeights, NegativeMining,
};
use crate::params::{Binder, Init, ParamStore};
use crate::real::Real;
use crate::referral::{ReferralTree, NODE_COUNT};
use crate::treeenc::{cell_registry, check_finite_states, TreeEncoder, TreeVars};
use crate::vocab::{CategoryDicts, TokenSequence, WordVocab};

/// Architecture hyperparameters. Two models with equal configs have
/// identical parameter layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_region: usize,
    pub d_word: usize,
    pub d_v: usize,
    pub d_node: usize,
    pub vocab_size: usize,
    pub n_fragments: usize,
    pub n_relations: usize,
    pub temperature: f64,
    pub cell_variant: String,
    pub tied_gru: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_region", self.d_region),
            ("d_word", self.d_word),
            ("d_v", self.d_v),
            ("d_node", self.d_node),
            ("vocab_size", self.vocab_size),
            ("n_fragments", self.n_fragments),
            ("n_relations", self.n_relations),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        cell_registry::<f64>().check(&self.cell_variant)
    }
}

/// Ranking-loss and fusion settings used when building the training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub margin: f64,
    pub fusion: FusionWeights,
    pub negatives: String,
    pub weights: LossWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            margin: crate::objective::DEFAULT_MARGIN,
            fusion: FusionWeights::default(),
            negatives: "sum".into(),
            weights: LossWeights::default(),
        }
    }
}

/// A sample resolved to model inputs.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image_id: String,
    pub features: Arc<Array2<f32>>,
    pub tokens: TokenSequence,
    pub tree: ReferralTree,
}

pub fn prepare(dataset: &Dataset, vocab: &WordVocab, dicts: &CategoryDicts) -> Result<Vec<PreparedSample>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let tokens = vocab.encode(&s.pair.sentence).map_err(|e| {
                Error::Input(format!("sample {}: {e}", s.pair.image_id))
            })?;
            Ok(PreparedSample {
                image_id: s.pair.image_id.clone(),
                features: s.regions.features.clone(),
                tokens,
                tree: s.pair.referral_tree.resolve(dicts),
            })
        })
        .collect()
}

/// Per-sample vectors: instance `D`, tree `T`, optional concept `C`, fused `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle<F: Real> {
    pub instance: Array1<F>,
    pub tree: Array1<F>,
    pub concept: Option<Array1<F>>,
    pub fused: Array1<F>,
}

/// Embedding plus the tree encoder's per-node distributions.
#[derive(Clone, Debug)]
pub struct Encoded<F: Real> {
    pub bundle: EmbeddingBundle<F>,
    pub node_probs: Vec<Array1<F>>,
}

/// Graph handles of one batch pass.
pub struct BatchVars {
    pub visual_instance: Var,
    pub text_instance: Var,
    pub visual_tree: TreeVars,
    pub text_tree: TreeVars,
    pub visual_fused: Var,
    pub text_fused: Var,
}

pub struct SmfeaModel<F: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub visual_tree: TreeEncoder<F>,
    pub text_tree: TreeEncoder<F>,
}

impl<F: Real> SmfeaModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = &config;
        let visual = VisualEncoder::new(&mut store, &mut init, c.d_region, c.d_v, c.temperature);
        let text = TextEncoder::new(&mut store, &mut init, c.vocab_size, c.d_word, c.d_v, c.temperature, c.tied_gru);
        let cells = cell_registry::<F>();
        let visual_tree = TreeEncoder::new(
            &mut store,
            &mut init,
            "vtree",
            c.d_v,
            c.d_node,
            c.n_fragments,
            c.n_relations,
            cells.create(&c.cell_variant)?,
        );
        let text_tree = TreeEncoder::new(
            &mut store,
            &mut init,
            "ttree",
            c.d_v,
            c.d_node,
            c.n_fragments,
            c.n_relations,
            cells.create(&c.cell_variant)?,
        );
        Ok(Self {
            config,
            store,
            visual,
            text,
            visual_tree,
            text_tree,
        })
    }

    fn stack_regions(&self, samples: &[&PreparedSample]) -> Result<(Array2<F>, Vec<usize>)> {
        let mut counts = Vec::with_capacity(samples.len());
        let total: usize = samples.iter().map(|s| s.features.nrows()).sum();
        let mut out = Array2::zeros((total, self.config.d_region));
        let mut row = 0;
        for s in samples {
            let f = &s.features;
            if f.ncols() != self.config.d_region {
                return Err(Error::Shape(format!(
                    "sample {}: region dim {} but model expects {}",
                    s.image_id,
                    f.ncols(),
                    self.config.d_region
                )));
            }
            let cast = f.mapv(|v| F::from_f64_lossy(v as f64));
            check_regions(&cast).map_err(|e| Error::Input(format!("sample {}: {e}", s.image_id)))?;
            out.slice_mut(ndarray::s![row..row + f.nrows(), ..]).assign(&cast);
            row += f.nrows();
            counts.push(f.nrows());
        }
        Ok((out, counts))
    }

    /// Forward both branches over a batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<F>,
        samples: &[&PreparedSample],
        fusion: &FusionWeights,
    ) -> Result<BatchVars> {
        if samples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let (regions, counts) = self.stack_regions(samples)?;
        let x = g.constant(regions);
        let vis = self.visual.forward(g, p, x, &counts);
        let seqs: Vec<&TokenSequence> = samples.iter().map(|s| &s.tokens).collect();
        let txt = self.text.forward(g, p, &seqs)?;
        let visual_tree = self.visual_tree.forward(g, p, vis.instances);
        let text_tree = self.text_tree.forward(g, p, txt.instances);
        check_finite_states(g, &visual_tree.nodes, 0)?;
        check_finite_states(g, &text_tree.nodes, 0)?;
        let visual_fused = fuse(g, vis.instances, visual_tree.embedding, None, fusion)?;
        let text_fused = fuse(g, txt.instances, text_tree.embedding, None, fusion)?;
        Ok(BatchVars {
            visual_instance: vis.instances,
            text_instance: txt.instances,
            visual_tree,
            text_tree,
            visual_fused,
            text_fused,
        })
    }

    /// Joint loss over a batch; returns the scalar root and its breakdown.
    pub fn batch_loss(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<F>,
        samples: &[&PreparedSample],
        objective: &ObjectiveConfig,
        mining: &dyn NegativeMining,
    ) -> Result<(Var, LossBreakdown)> {
        for s in samples {
            s.tree
                .validate(self.config.n_fragments, self.config.n_relations)
                .map_err(|e| Error::Input(format!("sample {}: {e}", s.image_id)))?;
        }
        let vars = self.forward_batch(g, p, samples, &objective.fusion)?;
        let sim = similarity_matrix(g, vars.visual_fused, vars.text_fused);
        let rank = triplet_op(g, sim, objective.margin, mining)?;
        let mut ce_terms = Vec::with_capacity(2 * NODE_COUNT);
        let mut kl_terms = Vec::with_capacity(NODE_COUNT);
        for t in 0..NODE_COUNT {
            let labels: Vec<usize> = samples.iter().map(|s| s.tree.ids()[t]).collect();
            ce_terms.push(g.cross_entropy(vars.visual_tree.logits[t], &labels));
            ce_terms.push(g.cross_entropy(vars.text_tree.logits[t], &labels));
            kl_terms.push(kl_op(g, vars.visual_tree.probs[t], vars.text_tree.probs[t])?);
        }
        let ce = g.add_all(&ce_terms);
        let kl = g.add_all(&kl_terms);
        Ok(joint_loss(g, LossTerms { rank, ce, kl }, &objective.weights))
    }

    /// Loss value and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        samples: &[&PreparedSample],
        objective: &ObjectiveConfig,
    ) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
        let mining = mining_registry().create(&objective.negatives)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let (root, breakdown) = self.batch_loss(&mut g, &mut p, samples, objective, mining.as_ref())?;
        let mut grads: Vec<Array2<F>> = self.store.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        for (slot, gr) in g.backward(root) {
            grads[slot] = gr;
        }
        Ok((breakdown, grads))
    }

    fn encode_chunks(
        &self,
        samples: &[&PreparedSample],
        fusion: &FusionWeights,
        chunk: usize,
    ) -> Result<(Vec<Encoded<F>>, Vec<Encoded<F>>)> {
        let mut images = Vec::with_capacity(samples.len());
        let mut sentences = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let mut p = Binder::new(&self.store);
            let vars = self.forward_batch(&mut g, &mut p, part, fusion)?;
            let collect = |inst: Var, tree: &TreeVars, fused: Var, out: &mut Vec<Encoded<F>>| {
                for r in 0..part.len() {
                    let row = |v: Var| g.value(v).index_axis(Axis(0), r).to_owned();
                    out.push(Encoded {
                        bundle: EmbeddingBundle {
                            instance: row(inst),
                            tree: row(tree.embedding),
                            concept: None,
                            fused: row(fused),
                        },
                        node_probs: tree.probs.iter().map(|&v| row(v)).collect(),
                    });
                }
            };
            collect(vars.visual_instance, &vars.visual_tree, vars.visual_fused, &mut images);
            collect(vars.text_instance, &vars.text_tree, vars.text_fused, &mut sentences);
        }
        Ok((images, sentences))
    }

    /// Encode both sides of every sample.
    pub fn encode(&self, samples: &[PreparedSample], fusion: &FusionWeights) -> Result<(Vec<Encoded<F>>, Vec<Encoded<F>>)> {
        let refs: Vec<&PreparedSample> = samples.iter().collect();
        self.encode_chunks(&refs, fusion, 64)
    }
}

/// Fraction of node predictions (argmax) equal to the referral labels, for
/// the visual and textual trees separately.
pub fn node_accuracy<F: Real>(
    images: &[Encoded<F>],
    sentences: &[Encoded<F>],
    samples: &[PreparedSample],
) -> (f64, f64) {
    let score = |side: &[Encoded<F>]| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (e, s) in side.iter().zip(samples) {
            for (t, p) in e.node_probs.iter().enumerate() {
                hit += usize::from(crate::treeenc::argmax(p) == s.tree.ids()[t]);
                total += 1;
            }
        }
        if total == 0 { 0.0 } else { hit as f64 / total as f64 }
    };
    (score(images), score(sentences))
}
