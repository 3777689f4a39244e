//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. `backward` walks
//! the record in reverse and returns gradients for every node plus the
//! accumulated parameter gradients.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct AttnSpec {
    groups: usize,
    q_per: usize,
    kv_per: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Detach,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    ScaleCols(Var, Vec<f64>),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    TileRows(Var),
    GroupMean(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient reaching `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.value(id).clone();
        self.push(t, Op::Param(id))
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows, 1, "bias must be a row vector");
        assert_eq!(x.cols, b.cols, "bias width mismatch");
        let mut t = x.clone();
        for r in 0..t.rows {
            for (o, &bv) in t.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(t, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        self.push(t, Op::Mul(a, b))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let x = self.value(a);
        let data = x.data.iter().zip(&c.data).map(|(p, q)| p * q).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        self.push(t, Op::MulConst(a, c))
    }

    /// Multiplies column `j` by `s[j]`.
    pub fn scale_cols(&mut self, a: Var, s: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, s.len(), "scale_cols width mismatch");
        let mut t = x.clone();
        for r in 0..t.rows {
            for (o, k) in t.row_mut(r).iter_mut().zip(&s) {
                *o *= k;
            }
        }
        self.push(t, Op::ScaleCols(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| 1.0 - v);
        self.push(t, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                t.row_mut(r)[off..off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            t.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let t = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(t, Op::SliceRows(a, start))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let t = Tensor::from_vec(rows, cols, x.data.clone());
        self.push(t, Op::Reshape(a))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&x.data);
        }
        let t = Tensor::from_vec(x.rows * times, x.cols, data);
        self.push(t, Op::TileRows(a))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.rows % group == 0, "group_mean row count");
        let g = x.rows / group;
        let mut t = Tensor::zeros(g, x.cols);
        let inv = 1.0 / group as f64;
        for r in 0..x.rows {
            let src = x.row(r);
            for (o, &v) in t.row_mut(r / group).iter_mut().zip(src) {
                *o += v * inv;
            }
        }
        self.push(t, Op::GroupMean(a, group))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups·q_per, d]`, `k` and `v` are `[groups·kv_per, d]`.
    /// Queries of group `g` attend only to keys of group `g`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols;
        assert!(heads > 0 && d % heads == 0, "attention width not divisible by heads");
        assert_eq!(kt.cols, d, "attention key width mismatch");
        assert_eq!(vt.shape(), kt.shape(), "attention value shape mismatch");
        assert!(groups > 0 && qt.rows % groups == 0 && kt.rows % groups == 0);
        let spec = AttnSpec {
            groups,
            q_per: qt.rows / groups,
            kv_per: kt.rows / groups,
            heads,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (m, n) = (spec.q_per, spec.kv_per);
        let mut out = Tensor::zeros(qt.rows, d);
        let mut probs = vec![0.0; groups * heads * m * n];
        let mut scores = vec![0.0; n];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..m {
                    let qr = &qt.row(g * m + i)[c0..c0 + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kr = &kt.row(g * n + j)[c0..c0 + dh];
                        *s = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let base = ((g * heads + h) * m + i) * n;
                    let orow = &mut out.row_mut(g * m + i)[c0..c0 + dh];
                    for (j, &s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[base + j] = p;
                        let vr = &vt.row(g * n + j)[c0..c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vr) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs })
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates the given output seeds.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, s) in seeds {
            assert_eq!(self.shape(*v), s.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, s.clone());
        }
        let mut params = ParamGrads::zeros_like(self.store);
        for idx in (0..self.nodes.len()).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(dy) = upper[0].as_ref() else { continue };
            let grads = lower;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => params.add(*id, dy),
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(dy);
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, &g) in db.data.iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *bias, db);
                    accumulate(grads, *a, dy.clone());
                }
                Op::Add(a, b) => {
                    accumulate(grads, *b, dy.clone());
                    accumulate(grads, *a, dy.clone());
                }
                Op::Mul(a, b) => {
                    let da = zip(dy, self.value(*b), |g, y| g * y);
                    let db = zip(dy, self.value(*a), |g, x| g * x);
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::MulConst(a, c) => accumulate(grads, *a, zip(dy, c, |g, k| g * k)),
                Op::ScaleCols(a, s) => {
                    let mut da = dy.clone();
                    for r in 0..da.rows {
                        for (o, k) in da.row_mut(r).iter_mut().zip(s) {
                            *o *= k;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Scale(a, s) => accumulate(grads, *a, dy.map(|g| g * s)),
                Op::OneMinus(a) => accumulate(grads, *a, dy.map(|g| -g)),
                Op::Tanh(a) => accumulate(grads, *a, zip(dy, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => accumulate(grads, *a, zip(dy, &node.value, |g, y| g * y * (1.0 - y))),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols;
                        let mut dp = Tensor::zeros(dy.rows, c);
                        for r in 0..dy.rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + c]);
                        }
                        off += c;
                        accumulate(grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let (r, c) = self.shape(p);
                        let dp = Tensor::from_vec(r, c, dy.data[off..off + n].to_vec());
                        off += n;
                        accumulate(grads, p, dp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        da.row_mut(i)[*start..*start + dy.cols].copy_from_slice(dy.row(i));
                    }
                    accumulate(grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    da.data[start * c..start * c + dy.len()].copy_from_slice(&dy.data);
                    accumulate(grads, *a, da);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(grads, *a, Tensor::from_vec(r, c, dy.data.clone()));
                }
                Op::TileRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for chunk in dy.data.chunks(r * c) {
                        for (o, &g) in da.data.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::GroupMean(a, group) => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / *group as f64;
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        for (o, &g) in da.row_mut(i).iter_mut().zip(dy.row(i / group)) {
                            *o = g * inv;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, dy);
                    accumulate(grads, *q, dq);
                    accumulate(grads, *k, dk);
                    accumulate(grads, *v, dv);
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols;
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (m, n) = (spec.q_per, spec.kv_per);
        let mut dq = Tensor::zeros(qt.rows, d);
        let mut dk = Tensor::zeros(kt.rows, d);
        let mut dv = Tensor::zeros(vt.rows, d);
        let mut dp = vec![0.0; n];
        for g in 0..spec.groups {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..m {
                    let base = ((g * spec.heads + h) * m + i) * n;
                    let p = &probs[base..base + n];
                    let dyr = &dy.row(g * m + i)[c0..c0 + dh];
                    let mut dot = 0.0;
                    for j in 0..n {
                        let vr = &vt.row(g * n + j)[c0..c0 + dh];
                        dp[j] = dyr.iter().zip(vr).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        let dvr = &mut dv.row_mut(g * n + j)[c0..c0 + dh];
                        for (o, &gv) in dvr.iter_mut().zip(dyr) {
                            *o += p[j] * gv;
                        }
                    }
                    let qr: Vec<f64> = qt.row(g * m + i)[c0..c0 + dh].to_vec();
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = &kt.row(g * n + j)[c0..c0 + dh];
                        let dqr = &mut dq.row_mut(g * m + i)[c0..c0 + dh];
                        for (o, &kv) in dqr.iter_mut().zip(kr) {
                            *o += ds * kv;
                        }
                        let dkr = &mut dk.row_mut(g * n + j)[c0..c0 + dh];
                        for (o, &qv) in dkr.iter_mut().zip(&qr) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
