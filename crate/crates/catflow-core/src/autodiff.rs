//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records the forward pass; [`Graph::backward`] walks the tape
//! in reverse creation order (which is a topological order by construction)
//! and accumulates gradients into every node. Training code builds a fresh
//! graph per step, so gradient buffers are zeroed explicitly at the start of
//! each backward pass rather than carried across steps.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::mat::{log_softmax_row, Mat};
use crate::num;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Value copied from the parent at construction; no backward edge.
    StopGrad,
    Add(Var, Var),
    /// `(R×C) + (1×C)` broadcast down rows.
    AddRowVec(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Recip(Var),
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulNt(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    SumAll(Var),
    /// Each row scaled by its own constant factor.
    RowScale(Var, Vec<f64>),
    /// Each row repeated `group` times consecutively.
    RepeatRows(Var, usize),
    /// Mean over consecutive groups of `group` rows.
    MeanPoolRows(Var, usize),
    ConcatCols(Var, Var),
    /// Row gather from a table; gradient scatters back.
    EmbedRows(Var, Vec<usize>),
    LogSoftmax(Var),
    /// Fused mean softmax-cross-entropy against integer targets.
    SoftmaxCeMean(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
}

/// A recorded computation; one graph, one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`.
    /// Zero matrix if the node was not reached.
    pub fn grad(&self, v: Var) -> Mat {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Mat::zeros(self.nodes[v.0].value.rows(), self.nodes[v.0].value.cols()),
        }
    }

    /// A differentiable input (parameter or data the loss may flow into).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Graph::leaf`] used for values that only carry data; the
    /// stop-gradient contract is enforced by [`Graph::stop_grad`], not here.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::scalar(value))
    }

    /// Identity in value; blocks gradient flow exactly.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGrad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Adds a 1×C row vector to every row of an R×C matrix.
    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(r.rows(), 1, "broadcast operand must be a row vector");
        assert_eq!(m.cols(), r.cols(), "broadcast width mismatch");
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        self.push(value, Op::AddRowVec(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value);
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(num::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(num::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(num::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(num::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(num::softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scales row `i` by `factors[i]`; factors are constants.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let m = &self.nodes[a.0].value;
        assert_eq!(m.rows(), factors.len(), "row_scale factor count mismatch");
        let mut value = m.clone();
        for (i, &f) in factors.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= f;
            }
        }
        self.push(value, Op::RowScale(a, factors))
    }

    /// Repeats each row `group` times: B×C -> (B*group)×C.
    pub fn repeat_rows(&mut self, a: Var, group: usize) -> Var {
        let m = &self.nodes[a.0].value;
        let mut value = Mat::zeros(m.rows() * group, m.cols());
        for i in 0..m.rows() {
            for g in 0..group {
                value.row_mut(i * group + g).copy_from_slice(m.row(i));
            }
        }
        self.push(value, Op::RepeatRows(a, group))
    }

    /// Means over consecutive groups of `group` rows: (B*group)×C -> B×C.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Var {
        let m = &self.nodes[a.0].value;
        assert_eq!(m.rows() % group, 0, "pool group must divide rows");
        let out_rows = m.rows() / group;
        let mut value = Mat::zeros(out_rows, m.cols());
        let inv = 1.0 / group as f64;
        for i in 0..out_rows {
            for g in 0..group {
                let src = m.row(i * group + g);
                for (o, &x) in value.row_mut(i).iter_mut().zip(src) {
                    *o += x * inv;
                }
            }
        }
        self.push(value, Op::MeanPoolRows(a, group))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let ma = &self.nodes[a.0].value;
        let mb = &self.nodes[b.0].value;
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row mismatch");
        let mut value = Mat::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            value.row_mut(i)[..ma.cols()].copy_from_slice(ma.row(i));
            value.row_mut(i)[ma.cols()..].copy_from_slice(mb.row(i));
        }
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Gathers `table` rows by id; the gradient scatters back additively.
    pub fn embed_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = &self.nodes[table.0].value;
        let mut value = Mat::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(value, Op::EmbedRows(table, ids))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..value.rows() {
            log_softmax_row(value.row_mut(r));
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Fused mean softmax-cross-entropy in nats; numerically stable and the
    /// only loss head used by training. Also returns the per-row losses as
    /// plain numbers (already detached) for per-sequence bookkeeping.
    pub fn softmax_ce_mean(&mut self, logits: Var, targets: Vec<usize>) -> (Var, Vec<f64>) {
        let l = &self.nodes[logits.0].value;
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        let mut per_row = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let mut row = l.row(r).to_vec();
            log_softmax_row(&mut row);
            let loss = -row[t];
            per_row.push(loss);
            total += loss;
        }
        let mean = total / targets.len() as f64;
        let var = self.push(Mat::scalar(mean), Op::SoftmaxCeMean(logits, targets));
        (var, per_row)
    }

    /// Reverse pass from a scalar loss. Gradients for every node reachable
    /// from `loss` are populated; stop-gradient nodes block flow exactly.
    pub fn backward(&mut self, loss: Var) -> CoreResult<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::InvalidInput(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Explicitly (re)zero every gradient buffer before accumulating.
        for node in self.nodes.iter_mut() {
            node.grad = Some(Mat::zeros(node.value.rows(), node.value.cols()));
        }
        self.nodes[loss.0].grad = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.clone().expect("grad allocated");
            if g.max_abs() == 0.0 {
                continue;
            }
            match op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    self.accum(a, &g);
                    self.accum(b, &g);
                }
                Op::AddRowVec(a, row) => {
                    self.accum(a, &g);
                    let mut rg = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in rg.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.accum(row, &rg);
                }
                Op::Scale(a, f) => {
                    let ga = g.scale(f);
                    self.accum(a, &ga);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |gi, bi| gi * bi);
                    let gb = g.zip_map(&self.nodes[a.0].value, |gi, ai| gi * ai);
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Recip(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, |gi, yi| -gi * yi * yi);
                    self.accum(a, &ga);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&self.nodes[b.0].value);
                    let gb = self.nodes[a.0].value.matmul_tn(&g);
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value);
                    let gb = g.matmul_tn(&self.nodes[a.0].value);
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    self.accum(a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi));
                    self.accum(a, &ga);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, |gi, yi| gi * yi);
                    self.accum(a, &ga);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip_map(x, |gi, xi| gi / xi);
                    self.accum(a, &ga);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip_map(x, |gi, xi| gi * num::sigmoid(xi));
                    self.accum(a, &ga);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let ga = Mat::filled(shape.0, shape.1, g.at(0, 0));
                    self.accum(a, &ga);
                }
                Op::RowScale(a, factors) => {
                    let mut ga = g.clone();
                    for (i, &f) in factors.iter().enumerate() {
                        for x in ga.row_mut(i) {
                            *x *= f;
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::RepeatRows(a, group) => {
                    let src_rows = self.nodes[a.0].value.rows();
                    let mut ga = Mat::zeros(src_rows, g.cols());
                    for i in 0..src_rows {
                        for k in 0..group {
                            let row = g.row(i * group + k);
                            for (o, &x) in ga.row_mut(i).iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::MeanPoolRows(a, group) => {
                    let src_rows = self.nodes[a.0].value.rows();
                    let inv = 1.0 / group as f64;
                    let mut ga = Mat::zeros(src_rows, g.cols());
                    for i in 0..src_rows {
                        let row = g.row(i / group);
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(row) {
                            *o = x * inv;
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let mut ga = Mat::zeros(g.rows(), ca);
                    let mut gb = Mat::zeros(g.rows(), g.cols() - ca);
                    for i in 0..g.rows() {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::EmbedRows(table, ids) => {
                    let t_shape = self.nodes[table.0].value.shape();
                    let mut gt = Mat::zeros(t_shape.0, t_shape.1);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.accum(table, &gt);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax(x) * rowsum(g)
                    let y = self.nodes[idx].value.clone();
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let row_sum: f64 = g.row(i).iter().sum();
                        for (o, &ly) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o -= num::exp(ly) * row_sum;
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::SoftmaxCeMean(logits, targets) => {
                    let scale = g.at(0, 0) / targets.len() as f64;
                    let l = self.nodes[logits.0].value.clone();
                    let mut gl = Mat::zeros(l.rows(), l.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        let mut row = l.row(r).to_vec();
                        log_softmax_row(&mut row);
                        for (c, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let p = num::exp(row[c]);
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *o = (p - onehot) * scale;
                        }
                    }
                    self.accum(logits, &gl);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &Mat) {
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.axpy(1.0, g),
            None => self.nodes[v.0].grad = Some(g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    /// Central finite differences of a scalar-valued builder with respect to
    /// every entry of every parameter; shared by the module oracle tests.
    pub(crate) fn finite_diff_check(
        params: &[Mat],
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        rel_tol: f64,
    ) {
        let eval = |p: &[Mat]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.iter().map(|m| g.leaf(m.clone())).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).at(0, 0)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|m| g.leaf(m.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = g.grad(vars[pi]);
            for k in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = numeric.abs().max(a.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < rel_tol,
                    "param {pi} entry {k}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(w * x) with fixed x => grad w = x.
        let x = Mat::from_vec(1, 3, vec![2.0, -1.0, 0.5]);
        let w = Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        let mut g = Graph::new();
        let wv = g.leaf(w);
        let xv = g.constant(x.clone());
        let prod = g.mul(wv, xv);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wv), x);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let w = g.leaf(Mat::scalar(3.0));
        let s = g.stop_grad(w);
        let sq = g.mul(s, s);
        let direct = g.mul(w, w);
        let loss = g.add(sq, direct);
        g.backward(loss).unwrap();
        // Only the direct path contributes: d(w^2)/dw = 6.
        assert_eq!(g.grad(w).at(0, 0), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Mat::zeros(2, 2));
        assert!(matches!(g.backward(w), Err(CoreError::InvalidInput(_))));
    }

    #[test]
    fn three_layer_network_matches_finite_differences() {
        let mut rng = Rng::seed_from(12);
        let x = rng.normal_mat(4, 3);
        let params = vec![
            rng.normal_mat(3, 6).scale(0.5),
            rng.normal_mat(1, 6).scale(0.1),
            rng.normal_mat(6, 6).scale(0.5),
            rng.normal_mat(1, 6).scale(0.1),
            rng.normal_mat(6, 5).scale(0.5),
            rng.normal_mat(1, 5).scale(0.1),
        ];
        let x_for_build = x.clone();
        let build = move |g: &mut Graph, vars: &[Var]| -> Var {
            let xv = g.constant(x_for_build.clone());
            let h1 = g.matmul(xv, vars[0]);
            let h1 = g.add_row_vec(h1, vars[1]);
            let h1 = g.tanh(h1);
            let h2 = g.matmul(h1, vars[2]);
            let h2 = g.add_row_vec(h2, vars[3]);
            let h2 = g.sigmoid(h2);
            let logits = g.matmul(h2, vars[4]);
            let logits = g.add_row_vec(logits, vars[5]);
            let (loss, _) = g.softmax_ce_mean(logits, vec![0, 2, 1, 4]);
            loss
        };
        finite_diff_check(&params, &build, 1e-4);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = Rng::seed_from(44);
        let params = vec![
            rng.normal_mat(2, 3),
            rng.normal_mat(4, 3),
            rng.normal_mat(1, 1),
        ];
        // Exercise embed, repeat, pool, concat, row_scale, log_softmax,
        // exp, ln, recip, softplus in one composite.
        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let gathered = g.embed_rows(vars[1], vec![3, 0, 3, 2]);
            let rep = g.repeat_rows(vars[0], 2);
            let sum = g.add(gathered, rep);
            let pooled = g.mean_pool_rows(sum, 2);
            let cat = g.concat_cols(pooled, pooled);
            let scaled = g.row_scale(cat, vec![0.5, -1.5]);
            let ls = g.log_softmax(scaled);
            let e = g.exp(ls);
            let shifted = g.scale(e, 0.9);
            let ln = g.ln(shifted);
            let sp = g.softplus(ln);
            let r = g.recip(vars[2]);
            let s1 = g.sum_all(sp);
            let prod = g.mul(s1, r);
            g.sum_all(prod)
        };
        finite_diff_check(&params, &build, 1e-4);
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = Rng::seed_from(5);
        let params = vec![rng.normal_mat(3, 4), rng.normal_mat(2, 4)];
        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let prod = g.matmul_nt(vars[0], vars[1]);
            let sq = g.square(prod);
            g.sum_all(sq)
        };
        finite_diff_check(&params, &build, 1e-4);
    }

    #[test]
    fn identical_graphs_produce_identical_gradients() {
        let run = || -> Vec<f64> {
            let mut rng = Rng::seed_from(99);
            let w = rng.normal_mat(5, 5);
            let x = rng.normal_mat(2, 5);
            let mut g = Graph::new();
            let wv = g.leaf(w);
            let xv = g.constant(x);
            let h = g.matmul(xv, wv);
            let t = g.tanh(h);
            let (loss, _) = g.softmax_ce_mean(t, vec![1, 3]);
            g.backward(loss).unwrap();
            g.grad(wv).into_data()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "gradients must be bit-identical across runs");
    }
}
