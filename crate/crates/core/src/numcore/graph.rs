//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only for the duration of one
//! forward/backward pass. Nodes are appended in evaluation order, so reverse
//! index order is a valid topological order for the backward sweep. Parameter
//! gradients are accumulated into a caller-supplied [`GradStore`], which lets
//! independent per-sentence graphs run on separate threads and be merged
//! afterwards.

use rand::Rng;

use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, Axis),
    LogSoftmaxRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var, Option<Axis>),
    Mean(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of non-parameter leaves created with [`Graph::leaf`].
pub struct LeafGrads {
    grads: Vec<Option<Tensor>>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`] when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Input, t, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_matrix("matmul")?;
        let (k2, n) = tb.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n, false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows, e.g. a bias.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.require_matrix("add_row")?;
        if tr.shape() != [1, n] {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), Tensor::matrix(m, n, out)?, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), t, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(op, t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax over `axis` of a matrix: `Axis::Cols` normalizes each row.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("softmax")?;
        let mut out = ta.data().to_vec();
        match axis {
            Axis::Cols => {
                for i in 0..m {
                    softmax_inplace(&mut out[i * n..(i + 1) * n]);
                }
            }
            Axis::Rows => {
                for j in 0..n {
                    let mut col: Vec<f64> = (0..m).map(|i| out[i * n + j]).collect();
                    softmax_inplace(&mut col);
                    for i in 0..m {
                        out[i * n + j] = col[i];
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a, axis), Tensor::matrix(m, n, out)?, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("log_softmax")?;
        let mut out = ta.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmaxRows(a), Tensor::matrix(m, n, out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("transpose")?;
        let t = transpose_data(ta.data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::matrix(n, m, t)?, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, len]));
        }
        let t = Tensor::matrix(len, n, ta.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start), t, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), Tensor::matrix(m, len, out)?, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let n = self.value(*first).require_matrix("concat_rows")?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.require_matrix("concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
            m += r;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(m, n, out)?, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let m = self.value(*first).require_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.require_matrix("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(m, n, out)?, rg))
    }

    /// Sum over an axis (keeping it as size 1) or over everything (scalar).
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let ta = self.value(a);
        let t = match axis {
            None => Tensor::scalar(ta.data().iter().sum()),
            Some(ax) => {
                let (m, n) = ta.require_matrix("sum")?;
                match ax {
                    Axis::Rows => {
                        let mut out = vec![0.0; n];
                        for i in 0..m {
                            for (o, v) in out.iter_mut().zip(ta.row(i)) {
                                *o += v;
                            }
                        }
                        Tensor::matrix(1, n, out)?
                    }
                    Axis::Cols => {
                        let out = (0..m).map(|i| ta.row(i).iter().sum()).collect();
                        Tensor::matrix(m, 1, out)?
                    }
                }
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a, axis), t, rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), t, rg)
    }

    /// Inverted dropout. Identity (no node recorded) when `!train` or `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(Op::Dropout(a, mask), t, rg))
    }

    /// Row lookup (embedding): output row `r` is row `ids[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (m, n) = tt.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::shape("gather_rows", tt.shape(), &[id]));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), n, out)?;
        let rg = self.rg(table);
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), t, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `1×n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_matrix("layer_norm")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::matrix(m, n, out)?,
            rg,
        ))
    }

    /// `Σ mask · [softplus(x) − t·x]`, the binary cross entropy of `sigmoid(x)`
    /// against targets `t`, in a form that never evaluates `log(0)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, mask: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", tl.shape(), targets.shape()));
        }
        if tl.shape() != mask.shape() {
            return Err(Error::shape("bce_with_logits", tl.shape(), mask.shape()));
        }
        let mut s = 0.0;
        for ((x, t), m) in tl.data().iter().zip(targets.data()).zip(mask.data()) {
            if *m != 0.0 {
                s += m * (softplus(*x) - t * x);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                mask: mask.data().to_vec(),
            },
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Parameter gradients are
    /// added into `grads`; gradients of [`Graph::leaf`] nodes are returned.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) -> Result<LeafGrads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[]));
        }
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.as_ref();
            match &node.op {
                Op::Input => leaves[idx] = Some(gout),
                Op::Param(id) => grads.accumulate_owned(*id, gout),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_acc(gout.data(), tb.data(), &mut ga, m, n, k, false, true);
                        self.acc(&mut g, *a, Tensor::matrix(m, k, ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_acc(ta.data(), gout.data(), &mut gb, k, m, n, true, false);
                        self.acc(&mut g, *b, Tensor::matrix(k, n, gb)?);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut g, *a, gout.clone());
                    self.acc(&mut g, *b, gout);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut g, *a, gout.clone());
                    let neg = map_t(&gout, |v| -v);
                    self.acc(&mut g, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        self.acc(&mut g, *a, zip_t(&gout, tb, |x, y| x * y));
                    }
                    if self.rg(*b) {
                        self.acc(&mut g, *b, zip_t(&gout, ta, |x, y| x * y));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let n = gout.cols();
                        let mut gr = vec![0.0; n];
                        for i in 0..gout.rows() {
                            for (o, v) in gr.iter_mut().zip(gout.row(i)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut g, *row, Tensor::matrix(1, n, gr)?);
                    }
                    self.acc(&mut g, *a, gout);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut g, *a, map_t(&gout, |v| v * c));
                }
                Op::Sigmoid(a) => {
                    let y = out.unwrap();
                    self.acc(&mut g, *a, zip_t(&gout, y, |gv, s| gv * s * (1.0 - s)));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    self.acc(&mut g, *a, zip_t(&gout, x, |gv, xv| gv / xv));
                }
                Op::Exp(a) => {
                    let y = out.unwrap();
                    self.acc(&mut g, *a, zip_t(&gout, y, |gv, yv| gv * yv));
                }
                Op::Tanh(a) => {
                    let y = out.unwrap();
                    self.acc(&mut g, *a, zip_t(&gout, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.acc(&mut g, *a, zip_t(&gout, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Softmax(a, axis) => {
                    let y = out.unwrap();
                    let (m, n) = (y.rows(), y.cols());
                    let mut gx = vec![0.0; m * n];
                    match axis {
                        Axis::Cols => {
                            for i in 0..m {
                                let (yr, gr) = (y.row(i), gout.row(i));
                                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                                for j in 0..n {
                                    gx[i * n + j] = yr[j] * (gr[j] - dot);
                                }
                            }
                        }
                        Axis::Rows => {
                            for j in 0..n {
                                let dot: f64 = (0..m).map(|i| y.get(i, j) * gout.get(i, j)).sum();
                                for i in 0..m {
                                    gx[i * n + j] = y.get(i, j) * (gout.get(i, j) - dot);
                                }
                            }
                        }
                    }
                    self.acc(&mut g, *a, Tensor::matrix(m, n, gx)?);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = out.unwrap();
                    let (m, n) = (y.rows(), y.cols());
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let gs: f64 = gout.row(i).iter().sum();
                        for j in 0..n {
                            gx[i * n + j] = gout.get(i, j) - y.get(i, j).exp() * gs;
                        }
                    }
                    self.acc(&mut g, *a, Tensor::matrix(m, n, gx)?);
                }
                Op::Transpose(a) => {
                    let (m, n) = (gout.rows(), gout.cols());
                    self.acc(&mut g, *a, Tensor::matrix(n, m, transpose_data(gout.data(), m, n))?);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut full = Tensor::zeros(src.shape());
                    let n = src.cols();
                    full.data_mut()[start * n..start * n + gout.numel()].copy_from_slice(gout.data());
                    self.acc(&mut g, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut full = Tensor::zeros(src.shape());
                    let (n, w) = (src.cols(), gout.cols());
                    for i in 0..gout.rows() {
                        full.data_mut()[i * n + start..i * n + start + w].copy_from_slice(gout.row(i));
                    }
                    self.acc(&mut g, *a, full);
                }
                Op::ConcatRows(parts) => {
                    let n = gout.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.rg(*p) {
                            let piece = gout.data()[offset * n..(offset + r) * n].to_vec();
                            self.acc(&mut g, *p, Tensor::matrix(r, n, piece)?);
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (gout.rows(), gout.cols());
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.rg(*p) {
                            let mut piece = Vec::with_capacity(m * w);
                            for i in 0..m {
                                piece.extend_from_slice(&gout.data()[i * n + offset..i * n + offset + w]);
                            }
                            self.acc(&mut g, *p, Tensor::matrix(m, w, piece)?);
                        }
                        offset += w;
                    }
                }
                Op::Sum(a, axis) => {
                    let src = self.value(*a);
                    let mut full = Tensor::zeros(src.shape());
                    match axis {
                        None => full.data_mut().fill(gout.item()),
                        Some(Axis::Rows) => {
                            let n = src.cols();
                            for (k, v) in full.data_mut().iter_mut().enumerate() {
                                *v = gout.data()[k % n];
                            }
                        }
                        Some(Axis::Cols) => {
                            let n = src.cols();
                            for (k, v) in full.data_mut().iter_mut().enumerate() {
                                *v = gout.data()[k / n];
                            }
                        }
                    }
                    self.acc(&mut g, *a, full);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let v = gout.item() / src.numel() as f64;
                    self.acc(&mut g, *a, Tensor::full(src.shape(), v));
                }
                Op::Dropout(a, mask) => {
                    let gx = Tensor::new(
                        gout.shape().to_vec(),
                        gout.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    )?;
                    self.acc(&mut g, *a, gx);
                }
                Op::GatherRows(table, ids) => {
                    let src = self.value(*table);
                    let n = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut full.data_mut()[id * n..(id + 1) * n];
                        for (d, v) in dst.iter_mut().zip(gout.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(&mut g, *table, full);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = (gout.rows(), gout.cols());
                    let tg = self.value(*gamma);
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut gg = vec![0.0; n];
                        let mut gb = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                gg[j] += gout.get(i, j) * xhat[i * n + j];
                                gb[j] += gout.get(i, j);
                            }
                        }
                        self.acc(&mut g, *gamma, Tensor::matrix(1, n, gg)?);
                        self.acc(&mut g, *beta, Tensor::matrix(1, n, gb)?);
                    }
                    if self.rg(*x) {
                        let mut gx = vec![0.0; m * n];
                        let nf = n as f64;
                        for i in 0..m {
                            let dxhat: Vec<f64> = (0..n).map(|j| gout.get(i, j) * tg.data()[j]).collect();
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().zip(&xhat[i * n..(i + 1) * n]).map(|(d, h)| d * h).sum();
                            for j in 0..n {
                                gx[i * n + j] = inv_std[i] / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                            }
                        }
                        self.acc(&mut g, *x, Tensor::matrix(m, n, gx)?);
                    }
                }
                Op::BceWithLogits { logits, targets, mask } => {
                    let x = self.value(*logits);
                    let go = gout.item();
                    let data = x
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(mask)
                        .map(|((xv, t), m)| go * m * (sigmoid(*xv) - t))
                        .collect();
                    self.acc(&mut g, *logits, Tensor::new(x.shape().to_vec(), data)?);
                }
            }
        }
        Ok(LeafGrads { grads: leaves })
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut g[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.add(*n, ParamGroup::Encoder, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    /// Central finite differences of `f` w.r.t. every entry of every parameter.
    fn check_grads(store: &ParamStore, f: &dyn Fn(&mut Graph) -> Var) {
        let mut grads = GradStore::new();
        {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss, &mut grads).unwrap();
        }
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.value(l).item()
        };
        let h = 1e-5;
        for (id, p) in store.iter() {
            for k in 0..p.value.numel() {
                let mut plus = store.clone();
                plus.value_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data_mut()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                let rel = (numeric - analytic).abs() / denom;
                assert!(
                    rel < 1e-4 || (numeric - analytic).abs() < 1e-9,
                    "{}[{k}]: analytic {analytic} numeric {numeric}",
                    p.name
                );
            }
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = random(&[3, 3], 4);
        let i = g.input(Tensor::identity(3));
        let av = g.input(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn uniform_softmax() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap());
        let y = g.softmax(x, Axis::Cols).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn linear_derivative() {
        let (s, ids) = store_with(&[("w", Tensor::matrix(1, 1, vec![0.7]).unwrap())]);
        let mut g = Graph::new(&s);
        let w = g.param(ids[0]);
        let x = g.input(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let wx = g.mul(w, x).unwrap();
        let l = g.sum(wx, None).unwrap();
        let mut grads = GradStore::new();
        g.backward(l, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[2.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let (s, ids) = store_with(&[("w", Tensor::scalar(0.0))]);
        let mut g = Graph::new(&s);
        let w = g.param(ids[0]);
        let y = g.sigmoid(w);
        let mut grads = GradStore::new();
        g.backward(y, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().item(), 0.25);
    }

    #[test]
    fn fan_out_accumulates() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.leaf(Tensor::scalar(1.5), true);
        let y = g.add(x, x).unwrap();
        let lg = g.backward(y, &mut GradStore::new()).unwrap();
        assert_eq!(lg.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(g.backward(x, &mut GradStore::new()).is_err());
    }

    #[test]
    fn dropout_identity_when_disabled() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.input(random(&[4, 4], 1));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let (s, _) = store_with(&[
            ("w1", random(&[3, 5], 1)),
            ("b1", random(&[1, 5], 2)),
            ("w2", random(&[5, 2], 3)),
            ("b2", random(&[1, 2], 4)),
        ]);
        let x = random(&[4, 3], 5);
        check_grads(&s, &|g: &mut Graph| {
            let xi = g.input(x.clone());
            let (w1, b1, w2, b2) = (
                g.param(ParamId(0)),
                g.param(ParamId(1)),
                g.param(ParamId(2)),
                g.param(ParamId(3)),
            );
            let h = g.matmul(xi, w1).unwrap();
            let h = g.add_row(h, b1).unwrap();
            let h = g.tanh(h);
            let o = g.matmul(h, w2).unwrap();
            let o = g.add_row(o, b2).unwrap();
            let o = g.sigmoid(o);
            g.sum(o, None).unwrap()
        });
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let (s, _) = store_with(&[
            ("a", random(&[3, 4], 11)),
            ("b", random(&[3, 4], 12)),
            ("gamma", random(&[1, 4], 13)),
            ("beta", random(&[1, 4], 14)),
            ("emb", random(&[5, 4], 15)),
        ]);
        let w = random(&[3, 4], 16);
        let targets = Tensor::new(vec![3, 4], (0..12).map(|k| (k % 3) as f64 / 2.0).collect()).unwrap();
        let mask = Tensor::new(vec![3, 4], (0..12).map(|k| (k % 2) as f64).collect()).unwrap();
        check_grads(&s, &|g: &mut Graph| {
            let (a, b) = (g.param(ParamId(0)), g.param(ParamId(1)));
            let (gamma, beta, emb) = (g.param(ParamId(2)), g.param(ParamId(3)), g.param(ParamId(4)));
            let wv = g.input(w.clone());
            let mut terms = Vec::new();
            let sa = g.sigmoid(a);
            terms.push(sa);
            let e = g.exp(a);
            terms.push(e);
            let lg_in = g.exp(b);
            let l = g.log(lg_in);
            terms.push(l);
            let t = g.tanh(b);
            terms.push(t);
            let r = g.relu(a);
            terms.push(r);
            let m = g.mul(a, b).unwrap();
            terms.push(m);
            let d = g.sub(a, b).unwrap();
            terms.push(d);
            let sc = g.scale(a, -1.7);
            terms.push(sc);
            let sm = g.softmax(a, Axis::Cols).unwrap();
            terms.push(sm);
            let sm0 = g.softmax(b, Axis::Rows).unwrap();
            terms.push(sm0);
            let ls = g.log_softmax_rows(b).unwrap();
            terms.push(ls);
            let ln = g.layer_norm(a, gamma, beta, 1e-5).unwrap();
            terms.push(ln);
            let bt = g.transpose(b).unwrap();
            let abt = g.matmul(a, bt).unwrap();
            let abt_s = g.sum(abt, Some(Axis::Rows)).unwrap();
            let abt_c = g.sum(abt, Some(Axis::Cols)).unwrap();
            let emb_rows = g.gather_rows(emb, &[0, 2, 2]).unwrap();
            terms.push(emb_rows);
            let sl = g.slice_cols(a, 1, 2).unwrap();
            let sr = g.slice_rows(b, 1, 2).unwrap();
            let cc = g.concat_cols(&[sl, sl]).unwrap();
            terms.push(cc);
            let cr = g.concat_rows(&[sr, a]).unwrap();
            let bce = g.bce_with_logits(b, &targets, &mask).unwrap();
            let mut total = g.mean(cr);
            for x in [abt_s, abt_c] {
                let s = g.sum(x, None).unwrap();
                let sq = g.mul(s, s).unwrap();
                total = g.add(total, sq).unwrap();
            }
            total = g.add(total, bce).unwrap();
            for term in terms {
                let weighted = g.mul(term, wv).unwrap();
                let s = g.sum(weighted, None).unwrap();
                total = g.add(total, s).unwrap();
            }
            total
        });
    }

    #[test]
    fn forward_backward_bit_deterministic() {
        let (s, _) = store_with(&[("a", random(&[3, 4], 1))]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new(&s);
            let a = g.param(ParamId(0));
            let d = g.dropout(a, 0.3, true, &mut rng).unwrap();
            let sm = g.softmax(d, Axis::Cols).unwrap();
            let l = g.sum(sm, Some(Axis::Rows)).unwrap();
            let l = g.mul(l, l).unwrap();
            let l = g.sum(l, None).unwrap();
            let mut grads = GradStore::new();
            g.backward(l, &mut grads).unwrap();
            (g.value(l).item().to_bits(), grads.get(ParamId(0)).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
