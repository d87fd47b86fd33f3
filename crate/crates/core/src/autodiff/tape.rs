use std::sync::atomic::{AtomicU64, Ordering};

use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`]. Only valid for the tape and generation that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    generation: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Spatial layout of a batch of feature maps stored as a
/// `(batch · height · width) × channels` matrix, row `b·H·W + y·W + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Odd square kernel side.
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    RowSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    BatchNorm { x: usize, inv_std: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Powf(usize, f64),
    DepthwiseConv {
        x: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SegmentMean { x: usize, segment: usize },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Mse(usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only record of matrix operations.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and the backward pass walks it in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    generation: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::new(),
        }
    }

    /// Drops every node. Vars created before the reset are rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(AutodiffError::StaleVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            generation: self.generation,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Matrix, AutodiffError> {
        Ok(self.val(self.check(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize), AutodiffError> {
        Ok(self.value(v)?.shape())
    }

    /// Leaf node; gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(Op::MatMul(ia, ib), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).add(self.val(ib))?;
        Ok(self.push(Op::Add(ia, ib), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).sub(self.val(ib))?;
        Ok(self.push(Op::Sub(ia, ib), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).hadamard(self.val(ib))?;
        Ok(self.push(Op::Mul(ia, ib), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let out = self.val(ia).scale(c);
        Ok(self.push(Op::Scale(ia, c), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let out = self.val(ia).transpose();
        Ok(self.push(Op::Transpose(ia), out))
    }

    /// `x + 1·row` for a `1 × cols` row vector.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (xv, rv) = (self.val(ix), self.val(ir));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(AutodiffError::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o += r;
            }
        }
        Ok(self.push(Op::AddRow(ix, ir), out))
    }

    /// Scales column `j` of `x` by `row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (xv, rv) = (self.val(ix), self.val(ir));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(AutodiffError::shape("mul_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o *= r;
            }
        }
        Ok(self.push(Op::MulRow(ix, ir), out))
    }

    /// Row-wise softmax with max subtraction. Non-finite input is rejected.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        if !xv.is_finite() {
            return Err(AutodiffError::NonFinite { op: "row_softmax" });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
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
        Ok(self.push(Op::RowSoftmax(ix), out))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let (n, d) = xv.shape();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        Ok(self.push(Op::LayerNorm { x: ix, inv_std }, out))
    }

    /// Per-column standardization over all rows (batch statistics), no affine part.
    /// Returns the normalized node plus the batch means and biased variances.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>), AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let (n, c) = xv.shape();
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        for i in 0..n {
            for ((o, m), s) in out.row_mut(i).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * s;
            }
        }
        let node = self.push(Op::BatchNorm { x: ix, inv_std }, out);
        Ok((node, mean, var))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(gelu);
        Ok(self.push(Op::Gelu(ix), out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(ix), out))
    }

    /// Elementwise `x^p`. Non-integer `p` needs positive entries.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(|v| v.powf(p));
        Ok(self.push(Op::Powf(ix, p), out))
    }

    /// Depthwise 2D cross-correlation with circular padding. `kernel` is
    /// `k² × channels`, row `ky·k + kx`; output position `(y, x)` reads input
    /// `(y + ky − k/2, x + kx − k/2)` modulo the map size.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    ) -> Result<Var, AutodiffError> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let (xv, kv) = (self.val(ix), self.val(ik));
        if geom.kernel % 2 == 0 || geom.kernel == 0 {
            return Err(AutodiffError::Geometry(format!(
                "kernel side {} must be odd",
                geom.kernel
            )));
        }
        if xv.rows() != geom.positions() {
            return Err(AutodiffError::Geometry(format!(
                "input has {} rows, geometry {}x{}x{} needs {}",
                xv.rows(),
                geom.batch,
                geom.height,
                geom.width,
                geom.positions()
            )));
        }
        if kv.shape() != (geom.kernel * geom.kernel, xv.cols()) {
            return Err(AutodiffError::shape("depthwise_conv", xv.shape(), kv.shape()));
        }
        let out = depthwise_forward(xv, kv, geom);
        Ok(self.push(
            Op::DepthwiseConv {
                x: ix,
                kernel: ik,
                geom,
            },
            out,
        ))
    }

    /// `x · w + b`: a 1×1 convolution over the channel axis.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        if len == 0 || start + len > xv.cols() {
            return Err(AutodiffError::Geometry(format!(
                "columns {start}..{} out of range for {} columns",
                start + len,
                xv.cols()
            )));
        }
        let out = xv.columns(start, len);
        Ok(self.push(Op::SliceCols { x: ix, start }, out))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        if len == 0 || start + len > xv.rows() {
            return Err(AutodiffError::Geometry(format!(
                "rows {start}..{} out of range for {} rows",
                start + len,
                xv.rows()
            )));
        }
        let out = xv.row_block(start, len);
        Ok(self.push(Op::SliceRows { x: ix, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let mats: Vec<&Matrix> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Matrix::hstack(&mats)?;
        Ok(self.push(Op::ConcatCols(idx), out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let mats: Vec<&Matrix> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Matrix::vstack(&mats)?;
        Ok(self.push(Op::ConcatRows(idx), out))
    }

    /// Averages consecutive blocks of `segment` rows (global average pooling).
    pub fn segment_mean(&mut self, x: Var, segment: usize) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        if segment == 0 || xv.rows() % segment != 0 {
            return Err(AutodiffError::Geometry(format!(
                "{} rows do not split into segments of {segment}",
                xv.rows()
            )));
        }
        let groups = xv.rows() / segment;
        let mut out = Matrix::zeros(groups, xv.cols());
        for i in 0..xv.rows() {
            let g = i / segment;
            for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(i)) {
                *o += v / segment as f64;
            }
        }
        Ok(self.push(Op::SegmentMean { x: ix, segment }, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.check(x)?;
        let out = Matrix::filled(1, 1, self.val(ix).sum());
        Ok(self.push(Op::Sum(ix), out))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let il = self.check(logits)?;
        let lv = self.val(il);
        let (b, c) = lv.shape();
        if targets.len() != b {
            return Err(AutodiffError::Geometry(format!(
                "{} targets for {b} rows of logits",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Geometry(format!("target {t} out of range for {c} classes")));
        }
        if !lv.is_finite() {
            return Err(AutodiffError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Matrix::filled(1, 1, loss / b as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let diff = self.val(ia).sub(self.val(ib))?;
        let out = Matrix::filled(1, 1, diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64);
        Ok(self.push(Op::Mse(ia, ib), out))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.shape(output)?;
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalar { shape });
        }
        self.backward_from(output, Matrix::filled(1, 1, 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to every node.
    pub fn backward_from(&self, output: Var, seed: Matrix) -> Result<Gradients, AutodiffError> {
        let out = self.check(output)?;
        if seed.shape() != self.val(out).shape() {
            return Err(AutodiffError::shape("backward seed", self.val(out).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            generation: self.generation,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_nt(g, self.val(*b))?);
                accumulate(grads, *b, matmul_tn(self.val(*a), g)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.val(*b))?);
                accumulate(grads, *b, g.hadamard(self.val(*a))?);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::AddRow(x, r) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *r, column_sums(g));
            }
            Op::MulRow(x, r) => {
                let rv = self.val(*r);
                let mut gx = g.clone();
                for k in 0..gx.rows() {
                    for (v, s) in gx.row_mut(k).iter_mut().zip(rv.as_slice()) {
                        *v *= s;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *r, column_sums(&g.hadamard(self.val(*x))?));
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in gx.row_mut(k).iter_mut().zip(yr).zip(gr) {
                        *o = a * (b - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = y.cols() as f64;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let mg = gr.iter().sum::<f64>() / d;
                    let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for ((o, a), b) in gx.row_mut(k).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[k] * (b - mg - a * mgy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::BatchNorm { x, inv_std } => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut mg = vec![0.0; c];
                let mut mgy = vec![0.0; c];
                for k in 0..n {
                    for j in 0..c {
                        mg[j] += g.get(k, j);
                        mgy[j] += g.get(k, j) * y.get(k, j);
                    }
                }
                let mut gx = Matrix::zeros(n, c);
                for k in 0..n {
                    for j in 0..c {
                        let v = inv_std[j]
                            * (g.get(k, j) - mg[j] / n as f64 - y.get(k, j) * mgy[j] / n as f64);
                        gx.set(k, j, v);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_with("gelu", self.val(*x), |gv, xv| gv * gelu_grad(xv))?;
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_with("relu", self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *x, gx);
            }
            Op::Powf(x, p) => {
                let p = *p;
                let gx = g.zip_with("powf", self.val(*x), |gv, xv| gv * p * xv.powf(p - 1.0))?;
                accumulate(grads, *x, gx);
            }
            Op::DepthwiseConv { x, kernel, geom } => {
                let (gx, gk) = depthwise_backward(self.val(*x), self.val(*kernel), g, *geom);
                accumulate(grads, *x, gx);
                accumulate(grads, *kernel, gk);
            }
            Op::SliceCols { x, start } => {
                let xv = self.val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for k in 0..g.rows() {
                    gx.row_mut(k)[*start..*start + g.cols()].copy_from_slice(g.row(k));
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for k in 0..g.rows() {
                    gx.row_mut(start + k).copy_from_slice(g.row(k));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    accumulate(grads, p, g.columns(off, c));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    accumulate(grads, p, g.row_block(off, r));
                    off += r;
                }
            }
            Op::SegmentMean { x, segment } => {
                let xv = self.val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for k in 0..xv.rows() {
                    for (o, v) in gx.row_mut(k).iter_mut().zip(g.row(k / segment)) {
                        *o = v / *segment as f64;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut gl = probs.clone();
                for (k, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(k);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, gl);
            }
            Op::Mse(a, b) => {
                let diff = self.val(*a).sub(self.val(*b))?;
                let ga = diff.scale(2.0 * g.get(0, 0) / diff.len() as f64);
                accumulate(grads, *b, ga.scale(-1.0));
                accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for k in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(k)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn wrap(v: isize, n: usize) -> usize {
    v.rem_euclid(n as isize) as usize
}

pub(crate) fn depthwise_forward(x: &Matrix, kernel: &Matrix, geom: ConvGeometry) -> Matrix {
    let ConvGeometry {
        batch,
        height,
        width,
        kernel: k,
    } = geom;
    let c = x.cols();
    let half = (k / 2) as isize;
    let mut out = Matrix::zeros(x.rows(), c);
    for b in 0..batch {
        let base = b * height * width;
        for y in 0..height {
            for xx in 0..width {
                let orow = base + y * width + xx;
                for ky in 0..k {
                    let sy = wrap(y as isize + ky as isize - half, height);
                    for kx in 0..k {
                        let sx = wrap(xx as isize + kx as isize - half, width);
                        let irow = base + sy * width + sx;
                        let krow = kernel.row(ky * k + kx);
                        let src = x.row(irow);
                        let dst = out.row_mut(orow);
                        for ch in 0..c {
                            dst[ch] += krow[ch] * src[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(x: &Matrix, kernel: &Matrix, g: &Matrix, geom: ConvGeometry) -> (Matrix, Matrix) {
    let ConvGeometry {
        batch,
        height,
        width,
        kernel: k,
    } = geom;
    let c = x.cols();
    let half = (k / 2) as isize;
    let mut gx = Matrix::zeros(x.rows(), c);
    let mut gk = Matrix::zeros(k * k, c);
    for b in 0..batch {
        let base = b * height * width;
        for y in 0..height {
            for xx in 0..width {
                let orow = base + y * width + xx;
                let grow = g.row(orow).to_vec();
                for ky in 0..k {
                    let sy = wrap(y as isize + ky as isize - half, height);
                    for kx in 0..k {
                        let sx = wrap(xx as isize + kx as isize - half, width);
                        let irow = base + sy * width + sx;
                        let kidx = ky * k + kx;
                        let krow = kernel.row(kidx);
                        let xrow = x.row(irow);
                        let gkrow = gk.row_mut(kidx);
                        for ch in 0..c {
                            gkrow[ch] += grow[ch] * xrow[ch];
                        }
                        let gxrow = gx.row_mut(irow);
                        for ch in 0..c {
                            gxrow[ch] += grow[ch] * krow[ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Per-node gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    generation: u32,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros for nodes the output does not depend on.
    pub fn get(&self, v: Var) -> Result<Matrix, AutodiffError> {
        if v.tape != self.tape || v.generation != self.generation || v.index >= self.shapes.len() {
            return Err(AutodiffError::StaleVar);
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                Matrix::zeros(r, c)
            }
        })
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Result<Matrix, AutodiffError> {
        let g = self.get(v)?;
        self.grads[v.index] = None;
        Ok(g)
    }
}
