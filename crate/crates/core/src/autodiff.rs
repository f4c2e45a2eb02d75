//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns gradients for
//! every parameter leaf that was bound through [`Tape::param`].

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Upper bound on `logit - row_max` when computing would-be softmax weights
/// of masked entries for the mask gradient.
const MASKED_EXP_CAP: f64 = 50.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Option<Var>,
        /// Would-be weights `exp(l - m) / S` for every entry of a normal row.
        ratio: Option<Mat>,
        fallback_rows: Vec<bool>,
    },
    StraightThrough(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    ClampMax(Var, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn scalar(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter as a leaf. Each parameter is bound at most once per
    /// tape so its gradient accumulates across every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over each row of `logits`, restricted to entries where `mask`
    /// is positive and weighted by the mask value:
    /// `w_ik = m_ik e^{l_ik} / Σ_k m_ik e^{l_ik}`.
    ///
    /// With a binary mask this is exactly softmax with `-∞` at masked
    /// entries; masked entries are never evaluated in the forward pass.
    /// A row with no positive mask entry takes uniform weights over
    /// `fallback[row]` (zeros if that list is empty) and passes no gradient.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<Var>, fallback: &[Vec<usize>]) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.dim();
        let mv = mask.map(|m| self.value(m));
        if let Some(m) = mv {
            assert_eq!(m.dim(), (rows, cols), "mask shape must match logits");
        }
        let mut w = Array2::zeros((rows, cols));
        let mut ratio = mask.map(|_| Array2::zeros((rows, cols)));
        let mut fallback_rows = vec![false; rows];
        for r in 0..rows {
            let active = |c: usize| mv.is_none_or(|m| m[[r, c]] > 0.0);
            let weight = |c: usize| mv.map_or(1.0, |m| m[[r, c]]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if active(c) {
                    max = max.max(lv[[r, c]]);
                }
            }
            if max == f64::NEG_INFINITY {
                fallback_rows[r] = true;
                let cols_fb = fallback.get(r).map(Vec::as_slice).unwrap_or(&[]);
                if !cols_fb.is_empty() {
                    let u = 1.0 / cols_fb.len() as f64;
                    for &c in cols_fb {
                        w[[r, c]] = u;
                    }
                }
                continue;
            }
            let mut total = 0.0;
            for c in 0..cols {
                if active(c) {
                    let e = weight(c) * (lv[[r, c]] - max).exp();
                    w[[r, c]] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                if active(c) {
                    w[[r, c]] /= total;
                }
            }
            if let Some(ratio) = ratio.as_mut() {
                for c in 0..cols {
                    ratio[[r, c]] = (lv[[r, c]] - max).min(MASKED_EXP_CAP).exp() / total;
                }
            }
        }
        self.push(
            w,
            Op::MaskedSoftmax {
                logits,
                mask,
                ratio,
                fallback_rows,
            },
        )
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Mat, soft: Var) -> Var {
        assert_eq!(hard.dim(), self.shape(soft), "straight-through shapes must match");
        self.push(hard, Op::StraightThrough(soft))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    /// Right-pads `a` with zero columns up to `width`.
    pub fn pad_cols(&mut self, a: Var, width: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(width >= cols, "pad_cols: width {width} < {cols}");
        if width == cols {
            return a;
        }
        let zeros = self.constant(Array2::zeros((rows, width - cols)));
        self.concat_cols(&[a, zeros])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).iter().map(|v| v * v).sum());
        self.push(value, Op::SumSquares(a))
    }

    pub fn clamp_max(&mut self, a: Var, limit: f64) -> Var {
        let value = self.value(a).mapv(|v| v.min(limit));
        self.push(value, Op::ClampMax(a, limit))
    }

    /// Sum of `1×1` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.constant(scalar(0.0)),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, store: &ParamStore, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Autodiff("root is not recorded on this tape".into()));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_with(store, root, scalar(1.0))
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&self, store: &ParamStore, root: Var, upstream: Mat) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Autodiff("root is not recorded on this tape".into()));
        }
        if upstream.dim() != self.shape(root) {
            return Err(Error::Autodiff(format!(
                "upstream gradient shape {:?} does not match root {:?}",
                upstream.dim(),
                self.shape(root)
            )));
        }
        let grads = self.node_gradients(root, upstream);
        let mut out = Gradients::zeros_like(store);
        for (id, var) in &self.params {
            if let Some(g) = &grads[var.0] {
                *out.get_mut(*id) += g;
            }
        }
        Ok(out)
    }

    /// Gradient of `root` with respect to every node (used by tests that
    /// probe gradients of intermediate or constant inputs).
    pub fn gradient_of(&self, root: Var, wrt: Var) -> Mat {
        let grads = self.node_gradients(root, scalar(1.0));
        grads[wrt.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shape(wrt)))
    }

    fn node_gradients(&self, root: Var, upstream: Mat) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(upstream);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, delta: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gain);
                let (rows, cols) = dxhat.dim();
                let nf = cols as f64;
                let mut dx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let row = dxhat.row(r);
                    let xr = xhat.row(r);
                    let sum_d: f64 = row.sum();
                    let sum_dx: f64 = row.iter().zip(xr.iter()).map(|(d, x)| d * x).sum();
                    for c in 0..cols {
                        dx[[r, c]] = inv_std[r] / nf * (nf * row[c] - sum_d - xr[c] * sum_dx);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MaskedSoftmax {
                logits,
                mask,
                ratio,
                fallback_rows,
            } => {
                let w = &node.value;
                let (rows, cols) = w.dim();
                let mut dl = Array2::zeros((rows, cols));
                let mut dm = mask.map(|_| Array2::zeros((rows, cols)));
                for r in 0..rows {
                    if fallback_rows[r] {
                        continue;
                    }
                    let centre: f64 = (0..cols).map(|c| g[[r, c]] * w[[r, c]]).sum();
                    for c in 0..cols {
                        let centred = g[[r, c]] - centre;
                        dl[[r, c]] = w[[r, c]] * centred;
                        if let (Some(dm), Some(ratio)) = (dm.as_mut(), ratio.as_ref()) {
                            dm[[r, c]] = ratio[[r, c]] * centred;
                        }
                    }
                }
                acc(grads, *logits, dl);
                if let (Some(m), Some(dm)) = (mask, dm) {
                    acc(grads, *m, dm);
                }
            }
            Op::StraightThrough(soft) => acc(grads, *soft, g.clone()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    acc(grads, *p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    acc(grads, *p, g.slice(s![.., start..start + cols]).to_owned());
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut full = Array2::zeros(self.shape(*a));
                let rows = g.nrows();
                full.slice_mut(s![*start..*start + rows, ..]).assign(g);
                acc(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let mut full = Array2::zeros(self.shape(*a));
                let cols = g.ncols();
                full.slice_mut(s![.., *start..*start + cols]).assign(g);
                acc(grads, *a, full);
            }
            Op::GatherRows(a, idx) => {
                let mut full = Array2::zeros(self.shape(*a));
                for (k, &r) in idx.iter().enumerate() {
                    let mut dst = full.row_mut(r);
                    dst += &g.row(k);
                }
                acc(grads, *a, full);
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                acc(grads, *a, Array2::from_elem(self.shape(*a), gv));
            }
            Op::SumSquares(a) => {
                let gv = g[[0, 0]];
                acc(grads, *a, self.value(*a) * (2.0 * gv));
            }
            Op::ClampMax(a, limit) => {
                let pass = self.value(*a).mapv(|v| if v < *limit { 1.0 } else { 0.0 });
                acc(grads, *a, g * &pass);
            }
        }
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
