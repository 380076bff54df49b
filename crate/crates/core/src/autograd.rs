//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every model in the crate builds its forward pass on a [`Tape`]. Inference
//! uses [`GradMode::None`] and simply drops the tape; training records the
//! graph and calls [`Tape::backward`] to obtain gradients for parameter
//! leaves.

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Which parameter leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Pure inference; nothing is differentiated.
    None,
    /// Only parameters flagged trainable in the store.
    Trainable,
    /// Every parameter, regardless of its flag (used by gradient checks).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, rstd: Vec<f64> },
    Softmax(usize),
    Gelu(usize),
    Gather { a: usize, index: Arc<[usize]> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SegLoss { logits: usize, target: Arc<[f64]>, w_bce: f64, w_dice: f64 },
    HalfSqErr { a: usize, target: Arc<[f64]> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    mode: GradMode,
}

/// Gradients of parameter leaves produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;
pub(crate) const DICE_SMOOTH: f64 = 1.0;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits plus `1 − soft Dice` on their sigmoid.
pub(crate) fn seg_loss_value(logits: &[f64], target: &[f64], w_bce: f64, w_dice: f64) -> f64 {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let p = sigmoid(z);
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let dice = (2.0 * inter + DICE_SMOOTH) / (sum_p + sum_t + DICE_SMOOTH);
    w_bce * bce / n + w_dice * (1.0 - dice)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new(mode: GradMode) -> Self {
        Tape { nodes: Vec::new(), leaves: HashMap::new(), mode }
    }

    pub fn inference() -> Self {
        Self::new(GradMode::None)
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated requests return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let rg = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => store.is_trainable(id),
            GradMode::All => true,
        };
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = gemm(ta, tb, self.value(a), self.value(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add: shapes differ");
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shapes differ");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row: bias shape");
        let mut value = va.clone();
        let cols = va.cols();
        for r in value.data_mut().chunks_mut(cols) {
            for (x, b) in r.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::AddRow(a.0, row.0), rg)
    }

    /// Row-wise layer norm with `1 × cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), cols, "layer_norm: gamma shape");
        assert_eq!(b.len(), cols, "layer_norm: beta shape");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, rg)
    }

    /// Row-wise softmax. `-inf` entries receive zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a.0);
        self.push(value, Op::Softmax(a.0), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a.0);
        self.push(value, Op::Gelu(a.0), rg)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `rows × cols`.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Arc<[usize]>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(rows, cols, data).unwrap();
        let rg = self.rg(a.0);
        self.push(value, Op::Gather { a: a.0, index }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols: row counts differ");
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, off + c, v.get(r, c));
                }
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows: column counts differ");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let value = Tensor::from_vec(rows, cols, data).unwrap();
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            for c in 0..len {
                out.set(r, c, v.get(r, start + c));
            }
        }
        let rg = self.rg(a.0);
        self.push(out, Op::SliceCols { a: a.0, start }, rg)
    }

    /// Weighted BCE + soft-Dice loss against a constant binary target.
    pub fn seg_loss(&mut self, logits: Var, target: Arc<[f64]>, w_bce: f64, w_dice: f64) -> Var {
        let value = seg_loss_value(self.value(logits).data(), &target, w_bce, w_dice);
        let rg = self.rg(logits.0);
        self.push(Tensor::filled(1, 1, value), Op::SegLoss { logits: logits.0, target, w_bce, w_dice }, rg)
    }

    /// `½‖a − target‖²`.
    pub fn half_sq_err(&mut self, a: Var, target: Arc<[f64]>) -> Var {
        let value = self.value(a).data().iter().zip(target.iter()).map(|(x, t)| 0.5 * (x - t) * (x - t)).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::filled(1, 1, value), Op::HalfSqErr { a: a.0, target }, rg)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::filled(rv.rows(), rv.cols(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_param: Vec<(ParamId, Tensor)> = self
            .leaves
            .iter()
            .filter(|(_, v)| v.0 <= root.0 && self.nodes[v.0].requires_grad)
            .map(|(&id, v)| {
                let g = grads[v.0].take().unwrap_or_else(|| {
                    let (r, c) = self.nodes[v.0].value.shape();
                    Tensor::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        by_param.sort_by_key(|(id, _)| *id);
        Gradients { by_param }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.rg(a) {
                    let ga = if ta { gemm(tb, true, vb, g) } else { gemm(false, !tb, g, vb) };
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = if tb { gemm(true, ta, g, va) } else { gemm(!ta, false, va, g) };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.rg(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
                }
                if self.rg(b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, row, gr);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = g.shape();
                let gam = self.nodes[*gamma].value.data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g.get(r, c) * gam[c];
                            mean_d += d;
                            mean_dx += d * xhat.get(r, c);
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = g.get(r, c) * gam[c];
                            gx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut gx = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        gx.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, a, gx);
            }
            &Op::Gelu(a) => {
                let x = &self.nodes[a].value;
                let d = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(grads, a, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::Gather { a, index } => {
                let src = &self.nodes[*a].value;
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                let gd = ga.data_mut();
                for (o, &s) in index.iter().enumerate() {
                    gd[s] += g.data()[o];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            for c in 0..cols {
                                gp.set(r, c, g.get(r, off + c));
                            }
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let cols = g.cols();
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    if self.rg(p) {
                        let d = g.data()[off * cols..(off + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(rows, cols, d).unwrap());
                    }
                    off += rows;
                }
            }
            &Op::SliceCols { a, start } => {
                let src = &self.nodes[a].value;
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::SegLoss { logits, target, w_bce, w_dice } => {
                let z = &self.nodes[*logits].value;
                let n = z.len() as f64;
                let upstream = g.data()[0];
                let p: Vec<f64> = z.data().iter().map(|&v| sigmoid(v)).collect();
                let inter: f64 = p.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                let denom = p.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_SMOOTH;
                let numer = 2.0 * inter + DICE_SMOOTH;
                let d = p
                    .iter()
                    .zip(target.iter())
                    .map(|(&pi, &ti)| {
                        let d_bce = (pi - ti) / n;
                        let d_dice_dp = (2.0 * ti * denom - numer) / (denom * denom);
                        let d_dice = -d_dice_dp * pi * (1.0 - pi);
                        upstream * (w_bce * d_bce + w_dice * d_dice)
                    })
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(z.rows(), z.cols(), d).unwrap());
            }
            Op::HalfSqErr { a, target } => {
                let x = &self.nodes[*a].value;
                let upstream = g.data()[0];
                let d = x.data().iter().zip(target.iter()).map(|(v, t)| upstream * (v - t)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(x.rows(), x.cols(), d).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every entry of every parameter.
    fn check(store: &mut ParamStore, build: impl Fn(&ParamStore, &mut Tape) -> Var) {
        let mut tape = Tape::new(GradMode::All);
        let root = build(store, &mut tape);
        let grads = tape.backward(root);
        let h = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let analytic = grads.get(id).unwrap().clone();
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let mut t = Tape::inference();
                let v = build(store, &mut t);
                let up = t.value(v).data()[0];
                store.get_mut(id).data_mut()[k] = orig - h;
                let mut t = Tape::inference();
                let v = build(store, &mut t);
                let down = t.value(v).data()[0];
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 1.37).sin()).collect()).unwrap()
    }

    #[test]
    fn matmul_variants_backprop() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(3, 4, 0.1), true).unwrap();
        let b = store.add("b", t(4, 2, 0.7), true).unwrap();
        let c = store.add("c", t(2, 4, 0.3), true).unwrap();
        let e = store.add("e", t(4, 3, 0.5), true).unwrap();
        let target: Arc<[f64]> = (0..6).map(|i| i as f64 * 0.1).collect::<Vec<_>>().into();
        check(&mut store, |s, tape| {
            let (va, vb, vc, ve) = (tape.param(s, a), tape.param(s, b), tape.param(s, c), tape.param(s, e));
            let ab = tape.matmul(va, vb);
            let act = tape.matmul_t(va, vc);
            let etb = tape.matmul_ex(ve, vb, true, false);
            let etct = tape.matmul_ex(ve, vc, true, true);
            let sum = tape.add(ab, act);
            let sum = tape.add(sum, etb);
            let sum = tape.add(sum, etct);
            tape.half_sq_err(sum, target.clone())
        });
    }

    #[test]
    fn layer_norm_softmax_gelu_backprop() {
        let mut store = ParamStore::new();
        let x = store.add("x", t(3, 5, 0.2), true).unwrap();
        let g = store.add("g", t(1, 5, 1.1), true).unwrap();
        let b = store.add("b", t(1, 5, 2.3), true).unwrap();
        let target: Arc<[f64]> = (0..15).map(|i| ((i % 3) == 0) as u8 as f64).collect::<Vec<_>>().into();
        check(&mut store, |s, tape| {
            let (vx, vg, vb) = (tape.param(s, x), tape.param(s, g), tape.param(s, b));
            let y = tape.layer_norm(vx, vg, vb);
            let y = tape.gelu(y);
            let sm = tape.softmax(y);
            let y = tape.mul(sm, y);
            let y = tape.add_row(y, vb);
            let y = tape.scale(y, 3.0);
            tape.seg_loss(y, target.clone(), 1.0, 1.0)
        });
    }

    #[test]
    fn structural_ops_backprop() {
        let mut store = ParamStore::new();
        let x = store.add("x", t(2, 3, 0.4), true).unwrap();
        let y = store.add("y", t(2, 2, 0.9), true).unwrap();
        let idx: Arc<[usize]> = vec![4, 0, 0, 3, 9, 7, 1, 2].into();
        let target: Arc<[f64]> = (0..8).map(|i| i as f64 * -0.2).collect::<Vec<_>>().into();
        check(&mut store, |s, tape| {
            let (vx, vy) = (tape.param(s, x), tape.param(s, y));
            let c = tape.concat_cols(&[vx, vy]);
            let r = tape.concat_rows(&[c, c]);
            let sl = tape.slice_cols(r, 1, 3);
            let sl = tape.gelu(sl);
            let yy = tape.concat_rows(&[vy, vy]);
            let flat = tape.concat_cols(&[sl, yy]);
            let gth = tape.gather(flat, 4, 2, idx.clone());
            tape.half_sq_err(gth, target.clone())
        });
    }

    #[test]
    fn masked_softmax_gives_zero_weight() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(1, 3, vec![1.0, f64::NEG_INFINITY, 1.0]).unwrap());
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient_in_trainable_mode() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(2, 2, 0.0), false).unwrap();
        let b = store.add("b", t(2, 2, 1.0), true).unwrap();
        let mut tape = Tape::new(GradMode::Trainable);
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let y = tape.matmul(va, vb);
        let l = tape.half_sq_err(y, vec![0.0; 4].into());
        let grads = tape.backward(l);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
