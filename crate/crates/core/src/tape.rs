//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its value and the information
//! needed to compute its vector-Jacobian product. `backward` walks the nodes
//! in reverse and accumulates gradients into every leaf that requires them.
//! A tape borrows parameter storage for its whole lifetime, so it lives
//! strictly inside one forward/backward pass on one thread.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { a: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    HardTanh { x: Var, temp: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, scale: f64 },
    GatherRows { src: Var, idx: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CausalUnfold { x: Var, window: usize, batch: usize },
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    SegmentCumProd { x: Var, lens: Vec<usize> },
    SegmentNormalize { x: Var, offsets: Vec<usize>, sums: Vec<f64>, guarded: Vec<bool> },
    SegmentWeightedSum { w: Var, rows: Var, offsets: Vec<usize> },
    Reshape(Var),
}

pub(crate) struct Node<'a> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Cow<'a, [f64]>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Record of primitive operations for one forward/backward pass.
pub struct Tape<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Constant, false)
    }

    /// A leaf that receives gradient but is not part of a [`ParamStore`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, true)
    }

    /// Borrows a parameter from `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.to_vec());
        self.push(shape, Cow::Owned(value), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub(crate) fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim("backward", format!("loss has shape {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input | Op::Param => {
                    leaves.insert(i, g);
                }
                op => self.backprop(op, i, &g, &mut grads),
            }
        }
        let params = self.params.iter().map(|(id, v)| (*id, v.0)).collect();
        Ok(Gradients { leaves, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &self.nodes[out].value;
        match op {
            Op::Constant | Op::Input | Op::Param => unreachable!(),
            &Op::MatMul { a, b, trans_a, trans_b, m, k, n } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, a) {
                    if trans_a {
                        gemm(k, n, m, bv, trans_b, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !trans_b, ga, true);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        gemm(n, m, k, g, true, av, trans_a, gb, true);
                    } else {
                        gemm(k, m, n, av, !trans_a, g, false, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    axpy(gb, 1.0, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    axpy(gb, -1.0, g);
                }
            }
            &Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(d, (g, b))| *d += g * b);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(d, (g, a))| *d += g * a);
                }
            }
            &Op::AddRowBias { a, bias } => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, 1.0, g);
                }
                let cols = self.nodes[bias.0].value.len();
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks_exact(cols) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, s, g);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, 1.0, g);
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                        if *y > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            &Op::HardTanh { x, temp } => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.acc(grads, x) {
                    for ((d, g), x) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        *d += g * hardtanh_slope(*x, temp);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let cols = self.nodes[out].shape.last().copied().unwrap_or(1);
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, g), y) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                        let gsum: f64 = g.iter().sum();
                        for j in 0..cols {
                            d[j] += g[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, scale } => {
                let (_, cols) = self.rows_cols(*logits);
                let lv = &self.nodes[logits.0].value;
                let upstream = g[0] * scale;
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((d, row), &t) in gl.chunks_exact_mut(cols).zip(lv.chunks_exact(cols)).zip(targets) {
                        let lse = log_sum_exp(row);
                        for j in 0..cols {
                            d[j] += upstream * (row[j] - lse).exp();
                        }
                        d[t] -= upstream;
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let (_, cols) = self.rows_cols(*src);
                if let Some(gs) = self.acc(grads, *src) {
                    for (row, &r) in g.chunks_exact(cols).zip(idx) {
                        axpy(&mut gs[r * cols..(r + 1) * cols], 1.0, row);
                    }
                }
            }
            Op::Gather { src, idx } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for (g, &i) in g.iter().zip(idx) {
                        gs[i] += g;
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (_, cols) = self.rows_cols(x);
                let (_, len) = self.rows_cols(Var(out));
                if let Some(gx) = self.acc(grads, x) {
                    for (drow, grow) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                        axpy(&mut drow[start..start + len], 1.0, grow);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, cols) = self.rows_cols(x);
                if let Some(gx) = self.acc(grads, x) {
                    axpy(&mut gx[start * cols..start * cols + g.len()], 1.0, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(gp, 1.0, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = self.rows_cols(Var(out));
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.rows_cols(p);
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            axpy(&mut gp[r * c..(r + 1) * c], 1.0, &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            &Op::CausalUnfold { x, window, batch } => {
                let (rows, d) = self.rows_cols(x);
                let width = (window + 1) * d;
                if let Some(gx) = self.acc(grads, x) {
                    for r in 0..rows {
                        let t = r / batch;
                        let b = r % batch;
                        for k in 0..=window {
                            if t + k < window {
                                continue;
                            }
                            let src = (t + k - window) * batch + b;
                            axpy(&mut gx[src * d..(src + 1) * d], 1.0, &g[r * width + k * d..r * width + (k + 1) * d]);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            &Op::RowDot(a, b) => {
                let (_, cols) = self.rows_cols(a);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, brow), g) in ga.chunks_exact_mut(cols).zip(bv.chunks_exact(cols)).zip(g) {
                        axpy(d, *g, brow);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((d, arow), g) in gb.chunks_exact_mut(cols).zip(av.chunks_exact(cols)).zip(g) {
                        axpy(d, *g, arow);
                    }
                }
            }
            Op::SegmentCumProd { x, lens } => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    let (mut xo, mut yo) = (0, 0);
                    for &len in lens {
                        // factors x_1..x_{len-1}, outputs y_0..y_{len-1} with y_0 = 1
                        let f = &xv[xo..xo + len - 1];
                        let ys = &y[yo..yo + len];
                        let gs = &g[yo..yo + len];
                        let mut tail = 0.0;
                        for m in (1..len).rev() {
                            tail = gs[m] + if m + 1 < len { f[m] * tail } else { 0.0 };
                            gx[xo + m - 1] += ys[m - 1] * tail;
                        }
                        xo += len - 1;
                        yo += len;
                    }
                }
            }
            Op::SegmentNormalize { x, offsets, sums, guarded } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..sums.len() {
                        if guarded[s] {
                            continue;
                        }
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let dot: f64 = g[lo..hi].iter().zip(&y[lo..hi]).map(|(g, y)| g * y).sum();
                        for j in lo..hi {
                            gx[j] += (g[j] - dot) / sums[s];
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { w, rows, offsets } => {
                let (_, cols) = self.rows_cols(*rows);
                let wv = &self.nodes[w.0].value;
                let rv = &self.nodes[rows.0].value;
                let segs = offsets.len() - 1;
                if let Some(gw) = self.acc(grads, *w) {
                    for s in 0..segs {
                        let gs = &g[s * cols..(s + 1) * cols];
                        for j in offsets[s]..offsets[s + 1] {
                            gw[j] += dot(gs, &rv[j * cols..(j + 1) * cols]);
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *rows) {
                    for s in 0..segs {
                        let gs = &g[s * cols..(s + 1) * cols];
                        for j in offsets[s]..offsets[s + 1] {
                            axpy(&mut gr[j * cols..(j + 1) * cols], wv[j], gs);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of leaves produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of an input leaf or parameter node, if the loss reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.leaves.get(node))
            .map(Vec::as_slice)
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut params = self.params.clone();
        params.sort();
        for (id, node) in params {
            if let Some(g) = self.leaves.get(&node) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn hardtanh_value(x: f64, temp: f64) -> f64 {
    let edge = 1.0 / temp;
    if x <= -edge {
        -1.0
    } else if x <= edge {
        temp * x
    } else {
        1.0
    }
}

/// Derivative of the tempered HardTanh; 0 at both kinks.
pub(crate) fn hardtanh_slope(x: f64, temp: f64) -> f64 {
    let edge = 1.0 / temp;
    if x > -edge && x < edge {
        temp
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = op(a) · op(b) (+ c if accumulate)` with `op(a): [m, k]`, `op(b): [k, n]`.
/// A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the kernel touches given
    // these strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
