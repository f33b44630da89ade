//! Fixed-topology tree-LSTM encoders over the 7-node referral layout.
//!
//! An instance embedding is mapped into seven node inputs, combined bottom-up
//! (leaves, then nodes 2 and 6, then the root), each node is classified into
//! its fragment or relation dictionary, and the hidden states are read out
//! into a structured embedding of the instance dimension.

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::referral::{children, kind_of, NodeKind, EVAL_ORDER, NODE_COUNT};
use crate::registry::Registry;

/// Gate column order inside the shared gate matrices.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

/// Graph handles for one node's state.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub h: Var,
    pub c: Var,
    /// The node's own forget gate, read by its parent in the `paper` cell.
    pub f: Var,
}

/// What a cell sees when updating one node.
pub struct CellContext<'a> {
    /// `x̂_t · W + b`, B × 4d in gate order i, f, o, u.
    pub pre_input: Var,
    /// Shared recurrent gate matrix `U`, d × 4d.
    pub recurrent: Var,
    pub children: &'a [NodeVars],
    pub d_node: usize,
}

/// Node update rule of the tree encoder.
pub trait TreeCell<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn update(&self, g: &mut Graph<F>, ctx: &CellContext) -> NodeVars;
}

fn gate<F: Real>(g: &mut Graph<F>, pre: Var, k: usize, d: usize) -> Var {
    g.slice_cols(pre, k * d, d)
}

/// `c_t = i ⊙ c̃ + f_t ⊙ Σ_k (f_k ⊙ c_k)`, gates driven by `h̃ = Σ_k h_k`.
pub struct PaperCell;

impl<F: Real> TreeCell<F> for PaperCell {
    fn name(&self) -> &'static str {
        "paper"
    }

    fn update(&self, g: &mut Graph<F>, ctx: &CellContext) -> NodeVars {
        let d = ctx.d_node;
        let pre = if ctx.children.is_empty() {
            ctx.pre_input
        } else {
            let hs: Vec<Var> = ctx.children.iter().map(|k| k.h).collect();
            let h_sum = g.add_all(&hs);
            let uh = g.matmul(h_sum, ctx.recurrent);
            g.add(ctx.pre_input, uh)
        };
        let i = gate(g, pre, GATE_INPUT, d);
        let i = g.sigmoid(i);
        let f = gate(g, pre, GATE_FORGET, d);
        let f = g.sigmoid(f);
        let o = gate(g, pre, GATE_OUTPUT, d);
        let o = g.sigmoid(o);
        let u = gate(g, pre, GATE_CANDIDATE, d);
        let u = g.tanh(u);
        let mut c = g.mul(i, u);
        if !ctx.children.is_empty() {
            let gated: Vec<Var> = ctx.children.iter().map(|k| g.mul(k.f, k.c)).collect();
            let carried = g.add_all(&gated);
            let carried = g.mul(f, carried);
            c = g.add(c, carried);
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        NodeVars { h, c, f }
    }
}

/// Standard child-sum tree-LSTM: one forget gate per child,
/// `f_tk = σ(W^f x̂_t + U^f h_k + b_f)`, `c_t = i ⊙ c̃ + Σ_k f_tk ⊙ c_k`.
pub struct ChildSumCell;

impl<F: Real> TreeCell<F> for ChildSumCell {
    fn name(&self) -> &'static str {
        "childsum"
    }

    fn update(&self, g: &mut Graph<F>, ctx: &CellContext) -> NodeVars {
        let d = ctx.d_node;
        let child_uh: Vec<Var> = ctx
            .children
            .iter()
            .map(|k| g.matmul(k.h, ctx.recurrent))
            .collect();
        let pre = if child_uh.is_empty() {
            ctx.pre_input
        } else {
            let sum = g.add_all(&child_uh);
            g.add(ctx.pre_input, sum)
        };
        let i = gate(g, pre, GATE_INPUT, d);
        let i = g.sigmoid(i);
        let o = gate(g, pre, GATE_OUTPUT, d);
        let o = g.sigmoid(o);
        let u = gate(g, pre, GATE_CANDIDATE, d);
        let u = g.tanh(u);
        let f_self = gate(g, pre, GATE_FORGET, d);
        let f_self = g.sigmoid(f_self);
        let mut c = g.mul(i, u);
        let x_forget = gate(g, ctx.pre_input, GATE_FORGET, d);
        for (k, uh) in ctx.children.iter().zip(&child_uh) {
            let uf = gate(g, *uh, GATE_FORGET, d);
            let fk = g.add(x_forget, uf);
            let fk = g.sigmoid(fk);
            let kept = g.mul(fk, k.c);
            c = g.add(c, kept);
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        NodeVars { h, c, f: f_self }
    }
}

pub fn cell_registry<F: Real>() -> Registry<dyn TreeCell<F>> {
    let mut reg: Registry<dyn TreeCell<F>> = Registry::new("cell variant");
    reg.register("paper", "outer forget gate over child-gated cells (default)", |_| {
        Ok(Box::new(PaperCell))
    });
    reg.register("childsum", "per-child forget gates, no outer gate", |_| {
        Ok(Box::new(ChildSumCell))
    });
    reg
}

/// Graph handles for a whole tree pass. Index `t - 1` holds node `t`.
pub struct TreeVars {
    pub inputs: [Var; NODE_COUNT],
    pub nodes: [NodeVars; NODE_COUNT],
    pub logits: [Var; NODE_COUNT],
    pub probs: [Var; NODE_COUNT],
    /// B × D_v structured embedding.
    pub embedding: Var,
}

/// Concrete per-node values for one sample.
#[derive(Clone, Debug)]
pub struct TreeNodeStates<F: Real> {
    pub inputs: Vec<Array1<F>>,
    pub cells: Vec<Array1<F>>,
    pub hidden: Vec<Array1<F>>,
    /// Category distribution per node: fragment dictionary for leaves,
    /// relation dictionary otherwise.
    pub probs: Vec<Array1<F>>,
}

pub struct TreeEncoder<F: Real> {
    pub prefix: String,
    pub node_inputs: [Linear; NODE_COUNT],
    pub w_gates: ParamId,
    pub u_gates: ParamId,
    pub b_gates: ParamId,
    pub fragment_classifier: Linear,
    pub relation_classifier: Linear,
    pub readout: [Linear; NODE_COUNT],
    pub d_node: usize,
    pub d_v: usize,
    cell: Box<dyn TreeCell<F>>,
}

impl<F: Real> TreeEncoder<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        d_v: usize,
        d_node: usize,
        n_fragments: usize,
        n_relations: usize,
        cell: Box<dyn TreeCell<F>>,
    ) -> Self {
        let node_inputs = std::array::from_fn(|t| {
            Linear::new(store, init, &format!("{prefix}.node_in.{}", t + 1), d_v, d_node)
        });
        let bound = 1.0 / (d_node as f64).sqrt();
        let w_gates = store.add(format!("{prefix}.gates.w"), init.uniform(d_node, 4 * d_node, bound));
        let u_gates = store.add(format!("{prefix}.gates.u"), init.uniform(d_node, 4 * d_node, bound));
        let b_gates = store.add(format!("{prefix}.gates.b"), init.uniform(1, 4 * d_node, bound));
        let fragment_classifier =
            Linear::new(store, init, &format!("{prefix}.cls_fragment"), d_node, n_fragments);
        let relation_classifier =
            Linear::new(store, init, &format!("{prefix}.cls_relation"), d_node, n_relations);
        let readout = std::array::from_fn(|t| {
            Linear::new(store, init, &format!("{prefix}.readout.{}", t + 1), d_node, d_v)
        });
        Self {
            prefix: prefix.to_string(),
            node_inputs,
            w_gates,
            u_gates,
            b_gates,
            fragment_classifier,
            relation_classifier,
            readout,
            d_node,
            d_v,
            cell,
        }
    }

    pub fn cell_name(&self) -> &'static str {
        self.cell.name()
    }

    /// `x̂_t = instance · W^o_t + b_t` for t = 1..7.
    pub fn map_node_inputs(&self, g: &mut Graph<F>, p: &mut Binder<F>, instance: Var) -> [Var; NODE_COUNT] {
        std::array::from_fn(|t| self.node_inputs[t].forward(g, p, instance))
    }

    /// Bottom-up node updates. Returns states indexed by node - 1.
    pub fn tree_forward(&self, g: &mut Graph<F>, p: &mut Binder<F>, inputs: &[Var; NODE_COUNT]) -> [NodeVars; NODE_COUNT] {
        let w = p.var(g, self.w_gates);
        let u = p.var(g, self.u_gates);
        let b = p.var(g, self.b_gates);
        let mut states: [Option<NodeVars>; NODE_COUNT] = [None; NODE_COUNT];
        for &t in &EVAL_ORDER {
            let xw = g.matmul(inputs[t - 1], w);
            let pre_input = g.add_row(xw, b);
            let kids: Vec<NodeVars> = children(t)
                .iter()
                .map(|&k| states[k - 1].expect("children evaluated first"))
                .collect();
            let ctx = CellContext {
                pre_input,
                recurrent: u,
                children: &kids,
                d_node: self.d_node,
            };
            states[t - 1] = Some(self.cell.update(g, &ctx));
        }
        states.map(|s| s.expect("all nodes evaluated"))
    }

    /// Per-node logits and softmax distributions.
    pub fn classify_nodes(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<F>,
        nodes: &[NodeVars; NODE_COUNT],
    ) -> ([Var; NODE_COUNT], [Var; NODE_COUNT]) {
        let logits: [Var; NODE_COUNT] = std::array::from_fn(|t| {
            let cls = match kind_of(t + 1) {
                NodeKind::Fragment => &self.fragment_classifier,
                NodeKind::Relation => &self.relation_classifier,
            };
            cls.forward(g, p, nodes[t].h)
        });
        let probs = std::array::from_fn(|t| g.softmax_rows(logits[t]));
        (logits, probs)
    }

    /// `Σ_t (h_t · W_t + b_t)`.
    pub fn tree_embedding(&self, g: &mut Graph<F>, p: &mut Binder<F>, nodes: &[NodeVars; NODE_COUNT]) -> Var {
        let parts: Vec<Var> = (0..NODE_COUNT)
            .map(|t| self.readout[t].forward(g, p, nodes[t].h))
            .collect();
        g.add_all(&parts)
    }

    pub fn forward(&self, g: &mut Graph<F>, p: &mut Binder<F>, instance: Var) -> TreeVars {
        let inputs = self.map_node_inputs(g, p, instance);
        let nodes = self.tree_forward(g, p, &inputs);
        let (logits, probs) = self.classify_nodes(g, p, &nodes);
        let embedding = self.tree_embedding(g, p, &nodes);
        TreeVars {
            inputs,
            nodes,
            logits,
            probs,
            embedding,
        }
    }

    /// Forward one instance vector and collect concrete node values.
    pub fn node_states(&self, store: &ParamStore<F>, instance: &Array1<F>) -> Result<(TreeNodeStates<F>, Array1<F>)> {
        let mut g = Graph::new();
        let mut p = Binder::new(store);
        let x = g.constant(instance.clone().insert_axis(ndarray::Axis(0)));
        let vars = self.forward(&mut g, &mut p, x);
        let row = |v: Var| g.value(v).row(0).to_owned();
        let states = TreeNodeStates {
            inputs: vars.inputs.iter().map(|&v| row(v)).collect(),
            cells: vars.nodes.iter().map(|n| row(n.c)).collect(),
            hidden: vars.nodes.iter().map(|n| row(n.h)).collect(),
            probs: vars.probs.iter().map(|&v| row(v)).collect(),
        };
        check_finite_states(&g, &vars.nodes, 0)?;
        Ok((states, row(vars.embedding)))
    }
}

/// Numeric error naming the first node whose state is not finite.
pub fn check_finite_states<F: Real>(g: &Graph<F>, nodes: &[NodeVars; NODE_COUNT], sample_offset: usize) -> Result<()> {
    for &t in &EVAL_ORDER {
        let n = &nodes[t - 1];
        for (what, v) in [("cell", n.c), ("hidden", n.h)] {
            if let Some(pos) = g.value(v).iter().position(|x| !x.is_finite()) {
                let row = pos / g.value(v).ncols();
                return Err(Error::Numeric(format!(
                    "non-finite {what} state at tree node {t} (sample {})",
                    sample_offset + row
                )));
            }
        }
    }
    Ok(())
}

/// One row of the per-sample node prediction export.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NodePrediction {
    pub node: usize,
    pub kind: NodeKind,
    pub top1_label: String,
    pub prob: f64,
}

/// Top-1 label and probability per node, labels resolved through `dicts`.
pub fn node_predictions<F: Real>(
    probs: &[Array1<F>],
    dicts: &crate::vocab::CategoryDicts,
) -> Vec<NodePrediction> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let node = i + 1;
            let best = argmax(p);
            let label = dicts
                .for_node(node)
                .label(best)
                .unwrap_or(crate::vocab::NULL_LABEL)
                .to_string();
            NodePrediction {
                node,
                kind: kind_of(node),
                top1_label: label,
                prob: p[best].to_f64().unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Index of the largest entry (first on ties).
pub fn argmax<F: Real>(v: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Split the shared gate matrices into their four d × d blocks.
pub fn gate_blocks<F: Real>(m: &Array2<F>, d: usize) -> [Array2<F>; 4] {
    std::array::from_fn(|k| m.slice(ndarray::s![.., k * d..(k + 1) * d]).to_owned())
}
