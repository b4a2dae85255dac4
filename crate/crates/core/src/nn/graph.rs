//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`]; parameters enter the tape through
//! [`Graph::param`] and their gradients come back from [`Graph::backward`]
//! as [`Grads`] aligned with the store. Nodes are appended in evaluation
//! order, so the reverse sweep is a single pass over the tape.

use std::collections::HashMap;

use super::tensor::{gemm, View};
use super::{Grads, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of a batched multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// Query `i` sees keys `j ≤ i + (kv_len − q_len)`.
    pub causal: bool,
    /// `batch × kv_len` validity flags; masked keys receive zero weight.
    pub key_mask: Option<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    GatherRows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    LogSoftmax(Var),
    Pick { a: Var, index: Vec<(u32, u32)> },
    Exp(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    param: Option<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    track: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    /// A tape whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), track: true }
    }

    /// A forward-only tape: nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { track: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(p)) => self.params.by_index(p),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Some(value), param: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Some(t), param: None, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// The named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_vars.get(&idx) {
            return v;
        }
        self.nodes.push(Node { value: None, param: Some(idx), op: Op::Leaf, needs_grad: self.track });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, &ta.data, View::dense(k), &tb.data, View::dense(n), 0.0, &mut out.data, View::dense(n));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(out, op, &[a, b])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| f(*x)).collect());
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!((1, ta.cols), tb.shape(), "add_row bias shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn linear(&mut self, x: Var, weight: &str, bias: &str) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), c.len(), "mul_const length");
        let data = ta.data.iter().zip(&c).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(out, Op::MulConst(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise layer normalization with learned gain and bias (`1×cols` each).
    pub fn layer_norm(&mut self, x: Var, gamma: &str, beta: &str) -> Var {
        let g = self.param(gamma);
        let b = self.param(beta);
        let (tx, tg, tb) = (self.value(x), self.value(g), self.value(b));
        let (rows, cols) = tx.shape();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * tg.data[c] + tb.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma: g, beta: b, xhat, rstd }, &[x, g, b])
    }

    /// Scaled dot-product attention over `heads` heads. `q` is
    /// `(batch·q_len)×d`, `k` and `v` are `(batch·kv_len)×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        assert_eq!(tq.rows, spec.batch * spec.q_len, "attention query rows");
        assert_eq!(tk.shape(), (spec.batch * spec.kv_len, d), "attention key shape");
        assert_eq!(tv.shape(), tk.shape(), "attention value shape");
        assert_eq!(d % spec.heads, 0, "model width not divisible by heads");
        if let Some(m) = &spec.key_mask {
            assert_eq!(m.len(), spec.batch * spec.kv_len, "key mask length");
        }
        let dh = d / spec.heads;
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let scale = 1.0 / (dh as f64).sqrt();
        let block = lq * lk;
        let mut probs = vec![0.0; spec.batch * spec.heads * block];
        let mut out = Tensor::zeros(tq.rows, d);
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &mut probs[(b * spec.heads + h) * block..][..block];
                let qv = View { offset: b * lq * d + h * dh, row_stride: d, col_stride: 1 };
                let kt = View { offset: b * lk * d + h * dh, row_stride: 1, col_stride: d };
                gemm(lq, dh, lk, scale, &tq.data, qv, &tk.data, kt, 0.0, p, View::dense(lk));
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let limit = if spec.causal { (i + lk).saturating_sub(lq) + 1 } else { lk };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let masked = j >= limit
                            || spec.key_mask.as_ref().is_some_and(|m| !m[b * lk + j]);
                        if masked {
                            *s = f64::NEG_INFINITY;
                        } else {
                            max = max.max(*s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                let vv = View { offset: b * lk * d + h * dh, row_stride: d, col_stride: 1 };
                let ov = View { offset: b * lq * d + h * dh, row_stride: d, col_stride: 1 };
                gemm(lq, lk, dh, 1.0, p, View::dense(lk), &tv.data, vv, 0.0, &mut out.data, ov);
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Row `i` of the result is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Var {
        let cols = self.value(sources[0]).cols;
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &(s, r)) in index.iter().enumerate() {
            let src = self.value(sources[s as usize]);
            assert_eq!(src.cols, cols, "gather_rows column mismatch");
            out.row_mut(i).copy_from_slice(src.row(r as usize));
        }
        self.push(out, Op::GatherRows { sources: sources.to_vec(), index }, sources)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Column vector of `a[row, col]` for each `(row, col)` in `index`.
    pub fn pick(&mut self, a: Var, index: Vec<(u32, u32)>) -> Var {
        let ta = self.value(a);
        let data = index.iter().map(|&(r, c)| ta.get(r as usize, c as usize)).collect();
        let out = Tensor::from_vec(index.len(), 1, data);
        self.push(out, Op::Pick { a, index }, &[a])
    }

    /// Gradients of the `1×1` node `loss` with respect to every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].param.is_some() {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(Var(i), &g, &mut grads);
        }
        let mut out = Grads::zeros_like(self.params);
        for (&p, &v) in &self.param_vars {
            out.grads[p] = grads[v.0].take();
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(node);
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_vec(t.rows, t.cols, data);
        match &self.nodes[node.0].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, &g.data, View::dense(n), &tb.data, View::transposed(n), 0.0, &mut da.data, View::dense(k));
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, 1.0, &ta.data, View::transposed(k), &g.data, View::dense(n), 0.0, &mut db.data, View::dense(n));
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, like(g, g.data.iter().map(|x| -x).collect()));
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, like(g, g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    acc(*b, like(g, g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let first: Vec<bool> = ta.data.iter().zip(&tb.data).map(|(x, y)| x <= y).collect();
                if self.needs(*a) {
                    acc(*a, like(g, g.data.iter().zip(&first).map(|(x, f)| if *f { *x } else { 0.0 }).collect()));
                }
                if self.needs(*b) {
                    acc(*b, like(g, g.data.iter().zip(&first).map(|(x, f)| if *f { 0.0 } else { *x }).collect()));
                }
            }
            Op::Scale(a, c) => acc(*a, like(g, g.data.iter().map(|x| x * c).collect())),
            Op::MulConst(a, c) => acc(*a, like(g, g.data.iter().zip(c).map(|(x, y)| x * y).collect())),
            Op::Gelu(a) => {
                let ta = self.value(*a);
                acc(*a, like(g, g.data.iter().zip(&ta.data).map(|(x, v)| x * gelu_grad(*v)).collect()));
            }
            Op::Exp(a) => acc(*a, like(g, g.data.iter().zip(&out.data).map(|(x, y)| x * y).collect())),
            Op::Softplus(a) => {
                let ta = self.value(*a);
                acc(*a, like(g, g.data.iter().zip(&ta.data).map(|(x, v)| x * sigmoid(*v)).collect()));
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                acc(*a, like(g, g.data.iter().zip(&ta.data).map(|(x, v)| 2.0 * x * v).collect()));
            }
            Op::Clamp { a, lo, hi } => {
                let ta = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(x, v)| if v < lo || v > hi { 0.0 } else { *x })
                    .collect();
                acc(*a, like(g, data));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::from_vec(ta.rows, ta.cols, vec![g.item(); ta.len()]));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let (rows, cols) = g.shape();
                if self.needs(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data[c] += g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = gr.iter().zip(&tg.data).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / cols as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx.data[r * cols + c] = rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols;
                let dh = d / spec.heads;
                let (lq, lk) = (spec.q_len, spec.kv_len);
                let scale = 1.0 / (dh as f64).sqrt();
                let block = lq * lk;
                let mut dq = Tensor::zeros(tq.rows, d);
                let mut dk = Tensor::zeros(tk.rows, d);
                let mut dv = Tensor::zeros(tv.rows, d);
                let mut dp = vec![0.0; block];
                for b in 0..spec.batch {
                    for h in 0..spec.heads {
                        let p = &probs[(b * spec.heads + h) * block..][..block];
                        let qo = b * lq * d + h * dh;
                        let ko = b * lk * d + h * dh;
                        let rows_q = View { offset: qo, row_stride: d, col_stride: 1 };
                        let rows_k = View { offset: ko, row_stride: d, col_stride: 1 };
                        let cols_k = View { offset: ko, row_stride: 1, col_stride: d };
                        // dV += Pᵀ dO
                        gemm(lk, lq, dh, 1.0, p, View::transposed(lk), &g.data, rows_q, 1.0, &mut dv.data, rows_k);
                        // dP = dO Vᵀ
                        gemm(lq, dh, lk, 1.0, &g.data, rows_q, &tv.data, cols_k, 0.0, &mut dp, View::dense(lk));
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                        for i in 0..lq {
                            let pr = &p[i * lk..(i + 1) * lk];
                            let dr = &mut dp[i * lk..(i + 1) * lk];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        // dQ += dS K ; dK += dSᵀ Q
                        gemm(lq, lk, dh, 1.0, &dp, View::dense(lk), &tk.data, rows_k, 1.0, &mut dq.data, rows_q);
                        gemm(lk, lq, dh, 1.0, &dp, View::transposed(lk), &tq.data, rows_q, 1.0, &mut dk.data, rows_k);
                    }
                }
                if self.needs(*q) {
                    acc(*q, dq);
                }
                if self.needs(*k) {
                    acc(*k, dk);
                }
                if self.needs(*v) {
                    acc(*v, dv);
                }
            }
            Op::GatherRows { sources, index } => {
                let mut partial: Vec<Option<Tensor>> = vec![None; sources.len()];
                for (i, &(s, r)) in index.iter().enumerate() {
                    let src = sources[s as usize];
                    if !self.needs(src) {
                        continue;
                    }
                    let slot = partial[s as usize].get_or_insert_with(|| {
                        let (rows, cols) = self.shape(src);
                        Tensor::zeros(rows, cols)
                    });
                    for (d, x) in slot.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                for (s, t) in partial.into_iter().enumerate() {
                    if let Some(t) = t {
                        acc(sources[s], t);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let mut da = g.clone();
                for r in 0..g.rows {
                    let total: f64 = g.row(r).iter().sum();
                    for (d, y) in da.row_mut(r).iter_mut().zip(out.row(r)) {
                        *d -= y.exp() * total;
                    }
                }
                acc(*a, da);
            }
            Op::Pick { a, index } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Tensor::zeros(rows, cols);
                for (i, &(r, c)) in index.iter().enumerate() {
                    da.data[r as usize * cols + c as usize] += g.data[i];
                }
                acc(*a, da);
            }
        }
    }
}
