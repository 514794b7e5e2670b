//! Forward constructors for every primitive recorded on a [`Tape`].

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{gemm, hardtanh_value, log_sum_exp, sigmoid, Op, Tape, Var};

impl<'a> Tape<'a> {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(x).to_vec();
        let value: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.needs(x);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.needs(a) || self.needs(b);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dims {k} and {k2} differ ({sa:?} · {sb:?})")));
        }
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), trans_a, self.value(b), trans_b, &mut value, false);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], Cow::Owned(value), Op::MatMul { a, b, trans_a, trans_b, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias: [c]` to every row of `a: [r, c]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        if self.value(bias).len() != cols {
            return Err(Error::dim("add_row_bias", format!("bias {:?} for {cols} columns", self.shape(bias))));
        }
        let bv = self.value(bias);
        let value: Vec<f64> = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(shape, Cow::Owned(value), Op::AddRowBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// HardTanh with temperature `temp`: `-1` below `-1/temp`, `temp·x` in
    /// `(-1/temp, 1/temp]`, `1` above.
    pub fn hardtanh(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temperature(temp)?;
        Ok(self.unary(x, Op::HardTanh { x, temp }, |v| hardtanh_value(v, temp)))
    }

    /// Inverted dropout. Identity (no node recorded) when `training` is false
    /// or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        check_rate(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let mask = sample_mask(n, p, rng);
        Ok(self.apply_mask(x, mask))
    }

    /// Multiplies `x` elementwise by a precomputed mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        debug_assert_eq!(mask.len(), self.value(x).len());
        let value: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, Cow::Owned(value), Op::Dropout { x, mask }, rg)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = self.shape(x).last().copied().unwrap_or(1);
        let value: Vec<f64> = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, Cow::Owned(value), Op::LogSoftmax(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        self.nll(logits, targets, 1.0 / n)
    }

    /// Summed negative log-likelihood.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.nll(logits, targets, 1.0)
    }

    fn nll(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits);
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::dim("cross_entropy", format!("target {t} outside {cols} classes")));
        }
        let total: f64 = self
            .value(logits)
            .chunks_exact(cols)
            .zip(targets)
            .map(|(row, &t)| log_sum_exp(row) - row[t])
            .sum();
        let rg = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![total * scale]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), scale },
            rg,
        ))
    }

    /// Selects rows of `src: [r, c]`; output `[idx.len(), c]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(src);
        if let Some(&r) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::dim("gather_rows", format!("row {r} of {rows}")));
        }
        let sv = self.value(src);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            value.extend_from_slice(&sv[r * cols..(r + 1) * cols]);
        }
        let rg = self.needs(src);
        Ok(self.push(vec![idx.len(), cols], Cow::Owned(value), Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    /// Selects flat elements of `src`; output `[idx.len()]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(src).len();
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {i} of {n}")));
        }
        let sv = self.value(src);
        let value: Vec<f64> = idx.iter().map(|&i| sv[i]).collect();
        let rg = self.needs(src);
        Ok(self.push(vec![idx.len()], Cow::Owned(value), Op::Gather { src, idx: idx.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > cols {
            return Err(Error::dim("slice_cols", format!("{start}..{} of {cols}", start + len)));
        }
        let value: Vec<f64> =
            self.value(x).chunks_exact(cols).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let rg = self.needs(x);
        Ok(self.push(vec![rows, len], Cow::Owned(value), Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > rows {
            return Err(Error::dim("slice_rows", format!("{start}..{} of {rows}", start + len)));
        }
        let value = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs(x);
        Ok(self.push(vec![len, cols], Cow::Owned(value), Op::SliceRows { x, start }, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.rows_cols(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::dim("concat_rows", format!("{c} columns, expected {cols}")));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], Cow::Owned(value), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.rows_cols(p).0).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::dim("concat_cols", format!("{r} rows, expected {rows}")));
            }
            total += c;
        }
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.rows_cols(p);
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], Cow::Owned(value), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// For `x: [T·B, D]` laid out time-major (`row = t·B + b`), builds
    /// `[T·B, (window+1)·D]` whose row `(t, b)` is
    /// `[x[t-window, b], …, x[t, b]]` with zero rows before `t = 0`.
    pub fn causal_unfold(&mut self, x: Var, window: usize, batch: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if batch == 0 || rows % batch != 0 {
            return Err(Error::dim("causal_unfold", format!("{rows} rows not divisible by batch {batch}")));
        }
        let width = (window + 1) * d;
        let xv = self.value(x);
        let mut value = vec![0.0; rows * width];
        for r in 0..rows {
            let (t, b) = (r / batch, r % batch);
            for k in 0..=window {
                if t + k < window {
                    continue;
                }
                let src = (t + k - window) * batch + b;
                value[r * width + k * d..r * width + (k + 1) * d].copy_from_slice(&xv[src * d..(src + 1) * d]);
            }
        }
        let rg = self.needs(x);
        Ok(self.push(vec![rows, width], Cow::Owned(value), Op::CausalUnfold { x, window, batch }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.needs(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.needs(x);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Mean(x), rg)
    }

    /// Inner product of matching rows: `[r, c] × [r, c] → [r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (rows, cols) = self.rows_cols(a);
        let value: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            self.value(a)
                .chunks_exact(cols)
                .zip(self.value(b).chunks_exact(cols))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                .collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![rows], Cow::Owned(value), Op::RowDot(a, b), rg))
    }

    /// Running products within ragged segments, each prefixed with an implicit
    /// leading 1. Segment `s` consumes `lens[s] - 1` factors and yields
    /// `lens[s]` outputs.
    pub fn segment_cumprod(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        if lens.contains(&0) {
            return Err(Error::dim("segment_cumprod", "empty segment"));
        }
        let need: usize = lens.iter().map(|l| l - 1).sum();
        let xv = self.value(x);
        if xv.len() != need {
            return Err(Error::dim("segment_cumprod", format!("{} factors for {need} slots", xv.len())));
        }
        let mut value = Vec::with_capacity(need + lens.len());
        let mut off = 0;
        for &len in lens {
            let mut acc = 1.0;
            value.push(acc);
            for f in &xv[off..off + len - 1] {
                acc *= f;
                value.push(acc);
            }
            off += len - 1;
        }
        let total = value.len();
        let rg = self.needs(x);
        Ok(self.push(vec![total], Cow::Owned(value), Op::SegmentCumProd { x, lens: lens.to_vec() }, rg))
    }

    /// Divides each ragged segment by its sum. Segments whose sum falls below
    /// `guard` become uniform and pass no gradient.
    pub fn segment_normalize(&mut self, x: Var, offsets: &[usize], guard: f64) -> Result<Var> {
        let xv = self.value(x);
        check_offsets("segment_normalize", offsets, xv.len())?;
        let segs = offsets.len() - 1;
        let mut value = vec![0.0; xv.len()];
        let mut sums = Vec::with_capacity(segs);
        let mut guarded = Vec::with_capacity(segs);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let sum: f64 = xv[lo..hi].iter().sum();
            let g = !(sum >= guard);
            if g {
                let u = 1.0 / (hi - lo) as f64;
                value[lo..hi].iter_mut().for_each(|v| *v = u);
            } else {
                for j in lo..hi {
                    value[j] = xv[j] / sum;
                }
            }
            sums.push(sum);
            guarded.push(g);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(
            shape,
            Cow::Owned(value),
            Op::SegmentNormalize { x, offsets: offsets.to_vec(), sums, guarded },
            rg,
        ))
    }

    /// `out[s] = Σ_{j ∈ segment s} w[j] · rows[j]`; output `[segments, c]`.
    pub fn segment_weighted_sum(&mut self, w: Var, rows: Var, offsets: &[usize]) -> Result<Var> {
        let (nrows, cols) = self.rows_cols(rows);
        let wv = self.value(w);
        if wv.len() != nrows {
            return Err(Error::dim("segment_weighted_sum", format!("{} weights for {nrows} rows", wv.len())));
        }
        check_offsets("segment_weighted_sum", offsets, nrows)?;
        let segs = offsets.len() - 1;
        let rv = self.value(rows);
        let mut value = vec![0.0; segs * cols];
        for s in 0..segs {
            let out = &mut value[s * cols..(s + 1) * cols];
            for j in offsets[s]..offsets[s + 1] {
                for (o, r) in out.iter_mut().zip(&rv[j * cols..(j + 1) * cols]) {
                    *o += wv[j] * r;
                }
            }
        }
        let rg = self.needs(w) || self.needs(rows);
        Ok(self.push(
            vec![segs, cols],
            Cow::Owned(value),
            Op::SegmentWeightedSum { w, rows, offsets: offsets.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} to {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(value), Op::Reshape(x), rg))
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], len: usize) -> Result<()> {
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&len)
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::dim(op, format!("bad segment offsets for length {len}")))
    }
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {p} outside [0, 1)")))
    }
}

pub(crate) fn check_temperature(temp: f64) -> Result<()> {
    if temp > 0.0 && temp.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("HardTanh temperature must be positive, got {temp}")))
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn sample_mask(n: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Scalar HardTanh with temperature.
pub fn hardtanh_temp(x: f64, temp: f64) -> Result<f64> {
    check_temperature(temp)?;
    Ok(hardtanh_value(x, temp))
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Causal 1-D convolution over `x: [T, D]` with `kernel: [(window+1)·D, D_out]`
/// and `bias: [D_out]`. Position `i` sees `x[i-window..=i]`, zero-padded on
/// the left.
pub fn causal_conv1d(tape: &mut Tape<'_>, x: Var, kernel: Var, bias: Var, window: usize) -> Result<Var> {
    let (_, d) = tape.rows_cols(x);
    let ks = tape.shape(kernel).to_vec();
    if ks.len() != 2 {
        return Err(Error::dim("causal_conv1d", format!("kernel shape {ks:?}")));
    }
    if ks[0] != (window + 1) * d {
        return Err(Error::Config(format!(
            "kernel spans {} inputs of width {d}, configured window covers {} positions",
            ks[0] as f64 / d.max(1) as f64,
            window + 1
        )));
    }
    let unfolded = tape.causal_unfold(x, window, 1)?;
    let z = tape.matmul(unfolded, kernel)?;
    tape.add_row_bias(z, bias)
}
