//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op computes its value eagerly and appends a node; inputs always precede the
//! node that consumes them, so a single reverse sweep visits each node exactly once.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, gemm, AttentionSpec};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{CctError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    MulConst { a: Var, c: Vec<f64> },
    Relu { a: Var },
    Sigmoid { a: Var },
    Abs { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    AddBias { a: Var, bias: Var },
    MulCol { a: Var, col: Var },
    SelectCol { a: Var, j: usize },
    Sum { a: Var },
    WeightedSum { a: Var, w: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var, mask: Option<Vec<bool>> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    GatedAttention { q: Var, k: Var, v: Var, w: Var, spec: AttentionSpec, aux: kernels::GatedProbs },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, denom: f64 },
    GatherRows { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CctError::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(CctError::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(CctError::dim(format!(
                "matmul_bt: cannot multiply {:?} by transpose of {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt { a, b, m, k, n }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.numel() == 1 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|x| f(*x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if ta.numel() == 1 {
            let x = ta.data()[0];
            let data = tb.data().iter().map(|y| f(x, *y)).collect();
            return Tensor::new(tb.shape().to_vec(), data);
        }
        same_shape(name, ta, tb)?;
        unreachable!()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x + c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::AddScalar { a }, rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != c.len() {
            return Err(CctError::dim(format!(
                "mul_const: {:?} against {} constants",
                ta.shape(),
                c.len()
            )));
        }
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst { a, c }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).unwrap()
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::relu);
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid { a }, rg)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs { a }, rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is 0 where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp { a, lo, hi }, rg)
    }

    /// Adds `bias: [n]` to every row of `a: [.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(CctError::dim(format!(
                "add_bias: bias {:?} does not match rows of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { a, bias }, rg))
    }

    /// Scales row `r` of `a: [m×n]` by `col[r]`, with `col: [m×1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = as_matrix(ta);
        if tc.numel() != m {
            return Err(CctError::dim(format!(
                "mul_col: column {:?} cannot scale rows of {:?}",
                tc.shape(),
                ta.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for (r, row) in data.chunks_mut(n.max(1)).enumerate() {
            let s = tc.data()[r];
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(t, Op::MulCol { a, col }, rg))
    }

    /// Column `j` of `a: [m×c]` as `[m×1]`.
    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = as_matrix(ta);
        if j >= c {
            return Err(CctError::index(format!("select_col: column {j} of {:?}", ta.shape())));
        }
        let data = (0..m).map(|r| ta.data()[r * c + j]).collect();
        let t = Tensor::new(vec![m, 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SelectCol { a, j }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// `Σ a_i w_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != w.len() {
            return Err(CctError::dim(format!(
                "weighted_sum: {:?} against {} weights",
                ta.shape(),
                w.len()
            )));
        }
        let s = kernels::dot(ta.data(), &w);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { a, w }, rg))
    }

    /// Layer normalization over the last axis followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 || tx.shape().is_empty() {
            return Err(CctError::dim("layer_norm: last dimension is 0"));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(CctError::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                tg.shape(),
                tb.shape()
            )));
        }
        let (out, xhat, rstd) = kernels::layer_norm(tx.data(), d, tg.data(), tb.data());
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row softmax. `mask`, when given, has one flag per element; masked entries are
    /// exactly 0 and a fully masked row is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if let Some(m) = &mask {
            if m.len() != ta.numel() {
                return Err(CctError::dim(format!(
                    "softmax_rows: mask of {} for {:?}",
                    m.len(),
                    ta.shape()
                )));
            }
        }
        let mut data = ta.data().to_vec();
        for (r, row) in data.chunks_mut(n.max(1)).enumerate() {
            match &mask {
                Some(m) => kernels::masked_softmax_in_place(row, |j| m[r * n + j]),
                None => kernels::masked_softmax_in_place(row, |_| true),
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a, mask }, rg))
    }

    /// Packed multi-head scaled dot-product attention; see [`AttentionSpec`].
    /// Validates attention operands and returns the model width.
    fn attention_checked(&self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<usize> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(CctError::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(CctError::dim(format!(
                "attention: width {d} not divisible into {} heads",
                spec.heads
            )));
        }
        for s in &spec.segments {
            if s.q_start + s.q_len > tq.rows() || s.k_start + s.k_len > tk.rows() || (spec.causal && s.k_len < s.q_len) {
                return Err(CctError::dim(format!("attention: segment {s:?} out of range")));
            }
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != tk.rows() {
                return Err(CctError::dim("attention: key mask length differs from key rows"));
            }
        }
        Ok(d)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.attention_checked(q, k, v, &spec)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (ctx, probs) = kernels::attention(tq.data(), tk.data(), tv.data(), d, &spec);
        let t = Tensor::new(vec![tq.rows(), d], ctx)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::Attention { q, k, v, spec, probs }, rg))
    }

    /// [`attention`](Self::attention) with a differentiable key weight column `w`
    /// (`[key_rows, 1]`, values in `[0, 1]`); see [`kernels::gated_attention`].
    pub fn gated_attention(&mut self, q: Var, k: Var, v: Var, w: Var, spec: AttentionSpec) -> Result<Var> {
        let tw = self.value(w);
        if tw.shape() != [self.value(k).rows(), 1] {
            return Err(CctError::dim(format!(
                "gated_attention: key weights {:?} for {} key rows",
                tw.shape(),
                self.value(k).rows()
            )));
        }
        let d = self.attention_checked(q, k, v, &spec)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (ctx, aux) = kernels::gated_attention(tq.data(), tk.data(), tv.data(), self.value(w).data(), d, &spec);
        let t = Tensor::new(vec![tq.rows(), d], ctx)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || self.rg(w);
        Ok(self.push(t, Op::GatedAttention { q, k, v, w, spec, aux }, rg))
    }

    /// Weighted mean negative log-likelihood `Σ w_i·nll_i / Σ w_i` (0 when all weights are 0).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = as_matrix(tl);
        if targets.len() != n || weights.len() != n {
            return Err(CctError::dim(format!(
                "cross_entropy: {n} logit rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(CctError::index(format!("cross_entropy: target {bad} outside vocabulary of {v}")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[targets[r]]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let denom: f64 = weights.iter().sum();
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                denom,
            },
            rg,
        ))
    }

    /// Rows `ids` of `table: [N×d]` as `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = as_matrix(tt);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(CctError::index(format!("gather_rows: row {id} of a {rows}-row table")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout: in training each element is zeroed with probability `rate` and
    /// survivors are scaled by `1/(1-rate)`; otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = self.value(a).numel();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                self.mul_const(a, mask)
            }
            _ => Ok(a),
        }
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store`; parameters not reached are zero.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                let g = self.params.get(&id).and_then(|v| self.grad(*v));
                match g {
                    Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).unwrap(),
                    None => Tensor::zeros(t.shape()),
                }
            })
            .collect()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CctError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gout) = hi[0].as_deref() else {
                continue;
            };
            self.backprop_node(i, gout, lo);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! g {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    gemm(m, n, k, gout, false, val(b), true, g!(a), true);
                }
                if wants(b) {
                    gemm(k, m, n, val(a), true, gout, false, g!(b), true);
                }
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                if wants(a) {
                    gemm(m, n, k, gout, false, val(b), false, g!(a), true);
                }
                if wants(b) {
                    gemm(n, m, k, gout, true, val(a), false, g!(b), true);
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                for (v, s) in [(a, 1.0), (b, sign)] {
                    if wants(v) {
                        let gv = g!(v);
                        if gv.len() == gout.len() {
                            gv.iter_mut().zip(gout).for_each(|(x, y)| *x += s * y);
                        } else {
                            gv[0] += s * gout.iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a).to_vec(), val(b).to_vec());
                for (v, other) in [(a, &vb), (b, &va)] {
                    if wants(v) {
                        let gv = g!(v);
                        let n = gout.len();
                        let o = |j: usize| if other.len() == 1 { other[0] } else { other[j] };
                        if gv.len() == n {
                            for j in 0..n {
                                gv[j] += gout[j] * o(j);
                            }
                        } else {
                            gv[0] += (0..n).map(|j| gout[j] * o(j)).sum::<f64>();
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                if wants(a) {
                    g!(a).iter_mut().zip(gout).for_each(|(x, y)| *x += s * y);
                }
            }
            &Op::AddScalar { a } => {
                if wants(a) {
                    g!(a).iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulConst { a, c } => {
                if wants(*a) {
                    g!(*a)
                        .iter_mut()
                        .zip(gout.iter().zip(c))
                        .for_each(|(x, (y, c))| *x += y * c);
                }
            }
            &Op::Relu { a } => {
                if wants(a) {
                    let va = val(a);
                    g!(a).iter_mut().enumerate().for_each(|(j, x)| {
                        if va[j] > 0.0 {
                            *x += gout[j]
                        }
                    });
                }
            }
            &Op::Sigmoid { a } => {
                if wants(a) {
                    let y = node.value.data();
                    g!(a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(j, x)| *x += gout[j] * y[j] * (1.0 - y[j]));
                }
            }
            &Op::Abs { a } => {
                if wants(a) {
                    let va = val(a);
                    g!(a).iter_mut().enumerate().for_each(|(j, x)| {
                        if va[j] > 0.0 {
                            *x += gout[j]
                        } else if va[j] < 0.0 {
                            *x -= gout[j]
                        }
                    });
                }
            }
            &Op::Clamp { a, lo, hi } => {
                if wants(a) {
                    let va = val(a);
                    g!(a).iter_mut().enumerate().for_each(|(j, x)| {
                        if va[j] > lo && va[j] < hi {
                            *x += gout[j]
                        }
                    });
                }
            }
            &Op::AddBias { a, bias } => {
                if wants(a) {
                    g!(a).iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if wants(bias) {
                    let gb = g!(bias);
                    let n = gb.len();
                    for row in gout.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::MulCol { a, col } => {
                let n = node.value.cols().max(1);
                if wants(a) {
                    let vc = val(col);
                    let ga = g!(a);
                    for (r, (grow, orow)) in ga.chunks_mut(n).zip(gout.chunks(n)).enumerate() {
                        grow.iter_mut().zip(orow).for_each(|(x, y)| *x += y * vc[r]);
                    }
                }
                if wants(col) {
                    let va = val(a);
                    let gc = g!(col);
                    for (r, (arow, orow)) in va.chunks(n).zip(gout.chunks(n)).enumerate() {
                        gc[r] += kernels::dot(arow, orow);
                    }
                }
            }
            &Op::SelectCol { a, j } => {
                if wants(a) {
                    let c = nodes[a.0].value.cols();
                    let ga = g!(a);
                    for (r, y) in gout.iter().enumerate() {
                        ga[r * c + j] += y;
                    }
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    g!(a).iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::WeightedSum { a, w } => {
                if wants(*a) {
                    g!(*a).iter_mut().zip(w).for_each(|(x, w)| *x += gout[0] * w);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let vg = val(*gain);
                if wants(*x) {
                    let gx = g!(*x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rstd.len() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = go[j] * vg[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = kernels::dot(&dxhat, xh);
                        let c = rstd[r] / d as f64;
                        let gr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gr[j] += c * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = g!(*gain);
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = g!(*bias);
                    for go in gout.chunks(d) {
                        gb.iter_mut().zip(go).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Softmax { a, mask } => {
                if wants(*a) {
                    let n = node.value.cols().max(1);
                    let y = node.value.data();
                    let ga = g!(*a);
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let s = kernels::dot(yr, gr);
                        for j in 0..n {
                            if mask.as_ref().is_none_or(|m| m[r * n + j]) {
                                ga[r * n + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, gout, grads);
            }
            Op::GatedAttention { q, k, v, w, spec, aux } => {
                self.gated_attention_backward([*q, *k, *v, *w], spec, aux, gout, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                if wants(*logits) && *denom > 0.0 {
                    let v = nodes[logits.0].value.cols();
                    let gl = g!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let w = gout[0] * weights[r] / denom;
                        if w == 0.0 {
                            continue;
                        }
                        let pr = &probs[r * v..(r + 1) * v];
                        let grow = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            grow[j] += w * pr[j];
                        }
                        grow[t] -= w;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let d = node.value.cols();
                    let gt = g!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &gout[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }

    fn gated_attention_backward(
        &self,
        vars: [Var; 4],
        spec: &AttentionSpec,
        aux: &kernels::GatedProbs,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let [q, k, v, w] = vars;
        let (vq, vk, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let vw = nodes[w.0].value.data();
        let d = nodes[q.0].value.cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; vq.len()];
        let mut gk = vec![0.0; vk.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut gw = vec![0.0; vw.len()];
        let (mut off, mut row) = (0, 0);
        let (mut dp, mut prefix) = (Vec::new(), Vec::new());
        for seg in &spec.segments {
            for head in 0..spec.heads {
                let c0 = head * dh;
                for i in 0..seg.q_len {
                    let p = &aux.probs[off..off + seg.k_len];
                    let r = &aux.shares[off..off + seg.k_len];
                    let rho = aux.presence[row];
                    off += seg.k_len;
                    row += 1;
                    if rho == 0.0 {
                        continue;
                    }
                    let wk = |j: usize| vw[seg.k_start + j];
                    let qi = (seg.q_start + i) * d + c0;
                    let go = &gout[qi..qi + dh];
                    dp.clear();
                    dp.resize(seg.k_len, 0.0);
                    // s: gradient w.r.t. rho
                    let mut s = 0.0;
                    for j in 0..seg.k_len {
                        if r[j] != 0.0 {
                            let kj = (seg.k_start + j) * d + c0;
                            dp[j] = kernels::dot(go, &vv[kj..kj + dh]);
                            s += wk(j) * r[j] * dp[j];
                            for c in 0..dh {
                                gv[kj + c] += p[j] * go[c];
                            }
                        }
                    }
                    for j in 0..seg.k_len {
                        if r[j] != 0.0 {
                            let ds = p[j] * (dp[j] - s) * scale;
                            let kj = (seg.k_start + j) * d + c0;
                            for c in 0..dh {
                                gq[qi + c] += ds * vk[kj + c];
                                gk[kj + c] += ds * vq[qi + c];
                            }
                            gw[seg.k_start + j] += rho * r[j] * (dp[j] - s);
                        }
                    }
                    // d rho / d w_j = prod over the other visible keys of (1 - w_k)
                    prefix.clear();
                    let mut acc = 1.0;
                    for j in 0..seg.k_len {
                        prefix.push(acc);
                        if spec.key_allowed(seg, i, j) {
                            acc *= 1.0 - wk(j);
                        }
                    }
                    let mut suffix = 1.0;
                    for j in (0..seg.k_len).rev() {
                        if spec.key_allowed(seg, i, j) {
                            gw[seg.k_start + j] += s * prefix[j] * suffix;
                            suffix *= 1.0 - wk(j);
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv), (w, gw)] {
            if nodes[var.0].requires_grad {
                let n = g.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
                slot.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (vq, vk, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let d = nodes[q.0].value.cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; vq.len()];
        let mut gk = vec![0.0; vk.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in &spec.segments {
            for head in 0..spec.heads {
                let c0 = head * dh;
                for i in 0..seg.q_len {
                    let p = &probs[off..off + seg.k_len];
                    off += seg.k_len;
                    let qi = (seg.q_start + i) * d + c0;
                    let go = &gout[qi..qi + dh];
                    dp.clear();
                    dp.resize(seg.k_len, 0.0);
                    let mut s = 0.0;
                    for j in 0..seg.k_len {
                        if p[j] != 0.0 {
                            let kj = (seg.k_start + j) * d + c0;
                            dp[j] = kernels::dot(go, &vv[kj..kj + dh]);
                            s += p[j] * dp[j];
                            for c in 0..dh {
                                gv[kj + c] += p[j] * go[c];
                            }
                        }
                    }
                    for j in 0..seg.k_len {
                        if p[j] != 0.0 {
                            let ds = p[j] * (dp[j] - s) * scale;
                            let kj = (seg.k_start + j) * d + c0;
                            for c in 0..dh {
                                gq[qi + c] += ds * vk[kj + c];
                                gk[kj + c] += ds * vq[qi + c];
                            }
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[var.0].requires_grad {
                let n = g.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
                slot.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }
    }
}
