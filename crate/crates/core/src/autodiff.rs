//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value is an `m × n` matrix; vectors are `1 × n` rows. Nodes are
//! appended in evaluation order, so a single reverse sweep is a valid
//! topological backward pass. Loss ops such as `cross_entropy`
//! compute their local Jacobian during the forward pass and store it; callers
//! can add their own through [`Graph::scalar_op`].

use ndarray::{s, Array2, Axis, Zip};

use crate::real::{lit, Real};

pub type Mat<F> = Array2<F>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat<F>),
    Scale(Var, F),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    NormalizeRows(Var, Vec<F>),
    /// Scalar loss with its stored Jacobian w.r.t. the single input.
    Reduce(Var, Mat<F>),
    /// Scalar loss over two inputs with both Jacobians.
    Reduce2(Var, Mat<F>, Var, Mat<F>),
}

struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: Vec<(Var, usize)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Mat<F>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, id));
        v
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Sum of one or more same-shape values.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// `a` (m×n) plus row vector `row` (1×n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Mat<F>) -> Var {
        let value = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `s * a + b` elementwise.
    pub fn affine(&mut self, a: Var, s: F, b: F) -> Var {
        let value = self.value(a).mapv(|x| s * x + b);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| F::one() / (F::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((rows.len(), src.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, rows), rg)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.gather_rows(a, vec![r])
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching widths");
        let rg = vars.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatRows(vars.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Scale each row to unit L2 norm. Zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<F> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = x.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            if n > F::zero() {
                row.mapv_inplace(|v| v / n);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows(a, norms), rg)
    }

    /// Scalar op whose Jacobian w.r.t. `input` was computed by the caller.
    pub fn scalar_op(&mut self, input: Var, value: F, jacobian: Mat<F>) -> Var {
        assert_eq!(self.shape(input), jacobian.dim());
        let rg = self.rg(input);
        self.push(Mat::from_elem((1, 1), value), Op::Reduce(input, jacobian), rg)
    }

    /// Two-input form of [`Graph::scalar_op`].
    pub fn scalar_op2(&mut self, a: Var, ja: Mat<F>, b: Var, jb: Mat<F>, value: F) -> Var {
        assert_eq!(self.shape(a), ja.dim());
        assert_eq!(self.shape(b), jb.dim());
        let rg = self.rg(a) || self.rg(b);
        self.push(Mat::from_elem((1, 1), value), Op::Reduce2(a, ja, b, jb), rg)
    }

    /// Σ_r −log softmax(logits_r)[label_r], computed stably from logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), labels.len());
        let probs = softmax_rows(x);
        let mut loss = F::zero();
        let mut jac = probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = x.row(r);
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            loss = loss + lse - row[y];
            jac[[r, y]] = jac[[r, y]] - F::one();
        }
        let rg = self.rg(logits);
        self.push(Mat::from_elem((1, 1), loss), Op::Reduce(logits, jac), rg)
    }

    /// Reverse sweep from scalar `root`. Returns `(param slot, gradient)` for
    /// every parameter leaf reached, in registration order.
    pub fn backward(&self, root: Var) -> Vec<(usize, Mat<F>)> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let y = &node.value;
            let mut acc = |v: Var, delta: Mat<F>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.zip_mut_with(&delta, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|v| -v));
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MulConst(a, c) => acc(*a, &g * c),
                Op::Scale(a, s) | Op::Affine(a, s) => acc(*a, g * *s),
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (F::one() - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * (F::one() - y * y));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Mat::zeros(y.dim());
                    for ((mut dr, gr), yr) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot = gr.dot(&yr);
                        Zip::from(&mut dr)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|d, &g, &y| *d = y * (g - dot));
                    }
                    acc(*a, d);
                }
                Op::MeanRows(a) => {
                    let m = self.value(*a).nrows();
                    let inv = F::one() / lit::<F>(m as f64);
                    let row = g.row(0).mapv(|v| v * inv);
                    let d = row.broadcast((m, row.len())).expect("broadcast").to_owned();
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::GatherRows(a, rows) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        d.row_mut(src).zip_mut_with(&g.row(r), |a, &b| *a = *a + b);
                    }
                    acc(*a, d);
                }
                Op::ConcatRows(vars) => {
                    let mut start = 0;
                    for v in vars {
                        let n = self.value(*v).nrows();
                        acc(*v, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::NormalizeRows(a, norms) => {
                    let mut d = Mat::zeros(y.dim());
                    for (r, &n) in norms.iter().enumerate() {
                        if n > F::zero() {
                            let (gr, yr) = (g.row(r), y.row(r));
                            let dot = gr.dot(&yr);
                            Zip::from(d.row_mut(r))
                                .and(&gr)
                                .and(&yr)
                                .for_each(|d, &g, &y| *d = (g - y * dot) / n);
                        }
                    }
                    acc(*a, d);
                }
                Op::Reduce(a, jac) => acc(*a, jac * g[[0, 0]]),
                Op::Reduce2(a, ja, b, jb) => {
                    acc(*a, ja * g[[0, 0]]);
                    acc(*b, jb * g[[0, 0]]);
                }
            }
        }

        let mut out: Vec<(usize, Mat<F>)> = Vec::with_capacity(self.params.len());
        for &(v, id) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out.push((id, g));
            } else {
                out.push((id, Mat::zeros(self.value(v).dim())));
            }
        }
        out
    }
}

pub fn softmax_rows<F: Real>(x: &Mat<F>) -> Mat<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every entry of every input.
    fn check(inputs: Vec<Mat<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Mat<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().enumerate().map(|(i, m)| g.param(i, m.clone())).collect();
            let root = build(&mut g, &vars);
            (g.scalar(root), g.backward(root))
        };
        let (_, analytic) = eval(&inputs);
        let eps = 1e-6;
        for (k, (_, grad)) in analytic.iter().enumerate() {
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
                plus[k][[r, c]] += eps;
                minus[k][[r, c]] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = grad[[r, c]];
                assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k} [{r},{c}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, w) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2));
        let bias = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, w, bias], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sigmoid(m);
            let t = g.tanh(v[1]);
            let d = g.sub(s, t);
            let e = g.affine(d, 0.7, 0.1);
            let p = g.matmul(e, v[2]);
            let q = g.add_row(p, v[3]);
            let sm = g.softmax_rows(q);
            let c = g.mul_const(sm, array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.2]]);
            g.sum_all(c)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 2, 4));
        check(vec![a, b], |g, v| {
            let cat = g.concat_rows(&[v[0], v[1]]);
            let picked = g.gather_rows(cat, vec![4, 0, 0, 2]);
            let cols = g.slice_cols(picked, 1, 2);
            let mean = g.mean_rows(cols);
            let t = g.transpose(cols);
            let prod = g.matmul(mean, t);
            let sq = g.mul(prod, prod);
            let n = g.normalize_rows(v[0]);
            let m = g.mul(n, v[0]);
            let x = g.sum_all(m);
            let y = g.sum_all(sq);
            let z = g.scale(y, 0.3);
            g.add(x, z)
        });
    }

    #[test]
    fn cross_entropy_and_custom_scalar_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_mat(&mut rng, 3, 5);
        let other = rand_mat(&mut rng, 3, 5);
        check(vec![logits, other], |g, v| {
            let ce = g.cross_entropy(v[0], &[1, 4, 0]);
            // Σ x² as a custom op with Jacobian 2x
            let x = g.value(v[1]).clone();
            let sq = g.scalar_op(v[1], x.mapv(|a| a * a).sum(), x.mapv(|a| 2.0 * a));
            g.add(ce, sq)
        });
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_get_zeros() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let p = g.param(0, array![[3.0, 4.0]]);
        let unused = g.param(1, array![[5.0]]);
        let m = g.mul(c, p);
        let root = g.sum_all(m);
        let grads = g.backward(root);
        assert_eq!(grads[0], (0, array![[1.0, 2.0]]));
        assert_eq!(grads[1], (1, array![[0.0]]));
        let _ = unused;
    }
}
