use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Mul,
    Scale,
    Relu,
    ScaleBy,
    LayerNorm,
    Softmax,
    SelectRenorm,
    GatherRows,
    ConcatCols,
    ConcatRows,
    SliceCols,
    Reshape,
    SumAll,
    SumRows,
    Mse,
    CvSquared,
    Gru,
}

struct GruSaved {
    hidden: usize,
    // per processed step, in processing order: r, z, n, gh_n, h_prev (each `hidden` wide)
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
    h_prev: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    AddRow { x: usize, row: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    ScaleBy { x: usize, s: usize, idx: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: usize },
    SelectRenorm { p: usize, keep: Vec<usize>, total: f64 },
    GatherRows { x: usize, idx: Vec<Option<usize>> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    SumRows { x: usize },
    Mse { pred: usize, target: Vec<f64> },
    CvSquared { v: usize },
    Gru { xproj: usize, w_hh: usize, b_hh: usize, reverse: bool, saved: GruSaved },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul { .. } => OpTag::MatMul,
            Op::AddRow { .. } => OpTag::AddRow,
            Op::Add { .. } => OpTag::Add,
            Op::Mul { .. } => OpTag::Mul,
            Op::Scale { .. } => OpTag::Scale,
            Op::Relu { .. } => OpTag::Relu,
            Op::ScaleBy { .. } => OpTag::ScaleBy,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::Softmax { .. } => OpTag::Softmax,
            Op::SelectRenorm { .. } => OpTag::SelectRenorm,
            Op::GatherRows { .. } => OpTag::GatherRows,
            Op::ConcatCols { .. } => OpTag::ConcatCols,
            Op::ConcatRows { .. } => OpTag::ConcatRows,
            Op::SliceCols { .. } => OpTag::SliceCols,
            Op::Reshape { .. } => OpTag::Reshape,
            Op::SumAll { .. } => OpTag::SumAll,
            Op::SumRows { .. } => OpTag::SumRows,
            Op::Mse { .. } => OpTag::Mse,
            Op::CvSquared { .. } => OpTag::CvSquared,
            Op::Gru { .. } => OpTag::Gru,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::SumRows { x } => vec![*x],
            Op::ScaleBy { x, s, .. } => vec![*x, *s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SelectRenorm { p, .. } => vec![*p],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::CvSquared { v } => vec![*v],
            Op::Gru { xproj, w_hh, b_hh, .. } => vec![*xproj, *w_hh, *b_hh],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of recorded operations.
///
/// Entries are stored in creation order, which is a topological order, so
/// [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view extents match data")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view extents match data")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    /// First recorded entry holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(Var, OpTag)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.tag()))
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a @ b`, or `a @ b^T` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let b_shape = self.shape(b).to_vec();
        if b_shape.len() != 2 {
            return Err(Error::dim("matmul", self.shape(a), &b_shape));
        }
        let (kb, n) = if trans_b {
            (b_shape[1], b_shape[0])
        } else {
            (b_shape[0], b_shape[1])
        };
        if k != kb {
            return Err(Error::dim("matmul", self.shape(a), &b_shape));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = view(self.value(a).data(), m, k);
            let braw = view(self.value(b).data(), b_shape[0], b_shape[1]);
            let bv = if trans_b { braw.t() } else { braw };
            general_mat_mul(1.0, &av, &bv, 0.0, &mut view_mut(&mut out, m, n));
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty") = n;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            chunk.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(out, Op::AddRow { x: x.0, row: row.0 }))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(x, y)| *x += y);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(x, y)| *x *= y);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x: x.0 })
    }

    /// `x * s[idx]` where `s` is a vector-valued node.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let n = self.value(s).numel();
        if idx >= n {
            return Err(Error::Contract(format!("scale_by index {idx} out of {n}")));
        }
        let c = self.value(s).data()[idx];
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        Ok(self.push(
            out,
            Op::ScaleBy {
                x: x.0,
                s: s.0,
                idx,
            },
        ))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(Error::dim("layer_norm", self.shape(x), &[]));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..d {
                    let h = (row[c] - mean) * is;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax { x: x.0 })
    }

    /// Keeps the entries listed in `keep`, zeroes the rest and rescales the
    /// survivors to sum to one. The survivor set is treated as constant when
    /// differentiating.
    pub fn select_renorm(&mut self, p: Var, keep: &[usize]) -> Result<Var> {
        let n = self.value(p).numel();
        if keep.is_empty() || keep.iter().any(|&i| i >= n) {
            return Err(Error::Contract(format!(
                "select_renorm: invalid survivor set {keep:?} for {n} entries"
            )));
        }
        let src = self.value(p).data();
        let total: f64 = keep.iter().map(|&i| src[i]).sum();
        if !(total > 0.0) {
            return Err(Error::Contract("select_renorm: survivors sum to zero".into()));
        }
        let mut out = vec![0.0; n];
        for &i in keep {
            out[i] = src[i] / total;
        }
        let shape = self.shape(p).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SelectRenorm {
                p: p.0,
                keep: keep.to_vec(),
                total,
            },
        ))
    }

    /// Builds a matrix whose row `r` is row `idx[r]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x);
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows: no rows selected".into()));
        }
        let mut out = vec![0.0; idx.len() * cols];
        let src = self.value(x).data();
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(Error::Input(format!("gather_rows: row {i} out of {rows}")));
                }
                out[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, out)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", self.shape(parts[0]), &[]));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows", self.shape(parts[0]), &[]));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x);
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(
            Tensor::matrix(rows, len, out)?,
            Op::SliceCols { x: x.0, start },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { x: x.0 }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 })
    }

    /// Column sums, `[rows, cols] -> [1, cols]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.mat_dims(x);
        let mut out = vec![0.0; cols];
        let src = self.value(x).data();
        for r in 0..rows {
            out.iter_mut()
                .zip(&src[r * cols..(r + 1) * cols])
                .for_each(|(a, b)| *a += b);
        }
        let t = Tensor::matrix(1, cols, out).expect("positive extents");
        self.push(t, Op::SumRows { x: x.0 })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).numel() != target.numel() {
            return Err(Error::dim("mse", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let err = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(err),
            Op::Mse {
                pred: pred.0,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Squared coefficient of variation `(std / mean)^2` of all entries,
    /// population convention.
    pub fn cv_squared(&mut self, v: Var) -> Result<Var> {
        let d = self.value(v).data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        if mean == 0.0 || !mean.is_finite() {
            return Err(Error::Contract(
                "coefficient of variation undefined for zero mean".into(),
            ));
        }
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(var / (mean * mean)), Op::CvSquared { v: v.0 }))
    }

    /// Gated recurrent unit over a precomputed input projection.
    ///
    /// `xproj` is `[T, 3H]` holding `x W_ih + b_ih` in `(r, z, n)` column
    /// order, `w_hh` is `[H, 3H]`, `b_hh` has `3H` entries. Output is `[T, H]`
    /// indexed by input time; with `reverse` the sequence is consumed last
    /// frame first.
    pub fn gru(&mut self, xproj: Var, w_hh: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let (steps, three_h) = self.mat_dims(xproj);
        if three_h % 3 != 0 {
            return Err(Error::dim("gru", self.shape(xproj), self.shape(w_hh)));
        }
        let h = three_h / 3;
        if self.shape(w_hh) != [h, three_h] || self.value(b_hh).numel() != three_h {
            return Err(Error::dim("gru", self.shape(xproj), self.shape(w_hh)));
        }
        let x = self.value(xproj).data();
        let w = self.value(w_hh).data();
        let bh = self.value(b_hh).data();
        let mut saved = GruSaved {
            hidden: h,
            r: Vec::with_capacity(steps * h),
            z: Vec::with_capacity(steps * h),
            n: Vec::with_capacity(steps * h),
            gh_n: Vec::with_capacity(steps * h),
            h_prev: Vec::with_capacity(steps * h),
        };
        let mut out = vec![0.0; steps * h];
        let mut state = vec![0.0; h];
        let mut gh = vec![0.0; three_h];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            gh.copy_from_slice(bh);
            for (i, &hi) in state.iter().enumerate() {
                if hi != 0.0 {
                    let wr = &w[i * three_h..(i + 1) * three_h];
                    gh.iter_mut().zip(wr).for_each(|(g, wv)| *g += hi * wv);
                }
            }
            let gx = &x[t * three_h..(t + 1) * three_h];
            saved.h_prev.extend_from_slice(&state);
            for j in 0..h {
                let r = sigmoid(gx[j] + gh[j]);
                let z = sigmoid(gx[h + j] + gh[h + j]);
                let n = (gx[2 * h + j] + r * gh[2 * h + j]).tanh();
                saved.r.push(r);
                saved.z.push(z);
                saved.n.push(n);
                saved.gh_n.push(gh[2 * h + j]);
                state[j] = (1.0 - z) * n + z * state[j];
            }
            out[t * h..(t + 1) * h].copy_from_slice(&state);
        }
        Ok(self.push(
            Tensor::matrix(steps, h, out)?,
            Op::Gru {
                xproj: xproj.0,
                w_hh: w_hh.0,
                b_hh: b_hh.0,
                reverse,
                saved,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate (`+=`)
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..end).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gy, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gy),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let at = &self.nodes[*a].value;
                let bt = &self.nodes[*b].value;
                let (m, k) = (at.rows(), at.cols());
                let (b0, b1) = (bt.shape()[0], bt.shape()[1]);
                let n = if *trans_b { b0 } else { b1 };
                let gyv = view(gy, m, n);
                let braw = view(bt.data(), b0, b1);
                if wants(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    // dA = dY @ B_eff^T
                    let beff_t = if *trans_b { braw } else { braw.t() };
                    general_mat_mul(1.0, &gyv, &beff_t, 1.0, &mut view_mut(ga, m, k));
                }
                if wants(*b) {
                    let gb = accumulate(grads, *b, b0 * b1);
                    let av = view(at.data(), m, k);
                    if *trans_b {
                        // B is [n, k]: dB = dY^T @ A
                        general_mat_mul(1.0, &gyv.t(), &av, 1.0, &mut view_mut(gb, b0, b1));
                    } else {
                        general_mat_mul(1.0, &av.t(), &gyv, 1.0, &mut view_mut(gb, b0, b1));
                    }
                }
            }
            Op::AddRow { x, row } => {
                if wants(*x) {
                    add_into(grads, *x, gy);
                }
                if wants(*row) {
                    let cols = self.nodes[*row].value.numel();
                    let gr = accumulate(grads, *row, cols);
                    for chunk in gy.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(grads, *a, gy);
                }
                if wants(*b) {
                    add_into(grads, *b, gy);
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if wants(*a) {
                    let c: Vec<f64> = gy.iter().zip(bv).map(|(g, y)| g * y).collect();
                    add_into(grads, *a, &c);
                }
                if wants(*b) {
                    let c: Vec<f64> = gy.iter().zip(av).map(|(g, y)| g * y).collect();
                    add_into(grads, *b, &c);
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    let g: Vec<f64> = gy.iter().map(|v| v * c).collect();
                    add_into(grads, *x, &g);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let out = node.value.data();
                    let g: Vec<f64> = gy
                        .iter()
                        .zip(out)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(grads, *x, &g);
                }
            }
            Op::ScaleBy { x, s, idx } => {
                let c = self.nodes[*s].value.data()[*idx];
                if wants(*x) {
                    let g: Vec<f64> = gy.iter().map(|v| v * c).collect();
                    add_into(grads, *x, &g);
                }
                if wants(*s) {
                    let xv = self.nodes[*x].value.data();
                    let d: f64 = gy.iter().zip(xv).map(|(g, v)| g * v).sum();
                    let n = self.nodes[*s].value.numel();
                    accumulate(grads, *s, n)[*idx] += d;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let g = self.nodes[*gamma].value.data();
                if wants(*gamma) {
                    let gg = accumulate(grads, *gamma, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += gy[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = accumulate(grads, *beta, d);
                    for chunk in gy.chunks(d) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(*x) {
                    let gx = accumulate(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = gy[r * d + c] * g[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let gx = accumulate(grads, *x, y.len());
                    for (r, (yr, gr)) in y.chunks(cols).zip(gy.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::SelectRenorm { p, keep, total } => {
                if wants(*p) {
                    let y = node.value.data();
                    let dot: f64 = keep.iter().map(|&j| gy[j] * y[j]).sum();
                    let gp = accumulate(grads, *p, y.len());
                    for &j in keep {
                        gp[j] += (gy[j] - dot) / total;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let cols = node.value.cols();
                    let n = self.nodes[*x].value.numel();
                    let gx = accumulate(grads, *x, n);
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            gx[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(&gy[r * cols..(r + 1) * cols])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if wants(p) {
                        let gp = accumulate(grads, p, rows * c);
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&gy[r * total + offset..r * total + offset + c])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if wants(p) {
                        add_into(grads, p, &gy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, cols) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                    let len = node.value.cols();
                    let gx = accumulate(grads, *x, rows * cols);
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(&gy[r * len..(r + 1) * len])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    add_into(grads, *x, gy);
                }
            }
            Op::SumAll { x } => {
                if wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    accumulate(grads, *x, n).iter_mut().for_each(|a| *a += gy[0]);
                }
            }
            Op::SumRows { x } => {
                if wants(*x) {
                    let cols = node.value.cols();
                    let n = self.nodes[*x].value.numel();
                    let gx = accumulate(grads, *x, n);
                    for chunk in gx.chunks_mut(cols) {
                        chunk.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mse { pred, target } => {
                if wants(*pred) {
                    let p = self.nodes[*pred].value.data();
                    let scale = 2.0 * gy[0] / p.len() as f64;
                    let g: Vec<f64> = p
                        .iter()
                        .zip(target)
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    add_into(grads, *pred, &g);
                }
            }
            Op::CvSquared { v } => {
                if wants(*v) {
                    let d = self.nodes[*v].value.data();
                    let n = d.len() as f64;
                    let mean = d.iter().sum::<f64>() / n;
                    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    let m2 = mean * mean;
                    let g: Vec<f64> = d
                        .iter()
                        .map(|x| gy[0] * (2.0 * (x - mean) / (n * m2) - 2.0 * var / (m2 * mean * n)))
                        .collect();
                    add_into(grads, *v, &g);
                }
            }
            Op::Gru {
                xproj,
                w_hh,
                b_hh,
                reverse,
                saved,
            } => self.backward_gru(*xproj, *w_hh, *b_hh, *reverse, saved, gy, grads),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gru(
        &self,
        xproj: usize,
        w_hh: usize,
        b_hh: usize,
        reverse: bool,
        saved: &GruSaved,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let h = saved.hidden;
        let three_h = 3 * h;
        let steps = gy.len() / h;
        let w = self.nodes[w_hh].value.data();
        let mut gx = vec![0.0; steps * three_h];
        let mut gw = vec![0.0; h * three_h];
        let mut gb = vec![0.0; three_h];
        let mut carry = vec![0.0; h];
        let mut dgh = vec![0.0; three_h];
        for s in (0..steps).rev() {
            let t = if reverse { steps - 1 - s } else { s };
            let base = s * h;
            for j in 0..h {
                let r = saved.r[base + j];
                let z = saved.z[base + j];
                let n = saved.n[base + j];
                let hp = saved.h_prev[base + j];
                let dh = gy[t * h + j] + carry[j];
                let dn = dh * (1.0 - z);
                let dz = dh * (hp - n);
                carry[j] = dh * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * saved.gh_n[base + j];
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                gx[t * three_h + j] = dr_pre;
                gx[t * three_h + h + j] = dz_pre;
                gx[t * three_h + 2 * h + j] = dn_pre;
                dgh[j] = dr_pre;
                dgh[h + j] = dz_pre;
                dgh[2 * h + j] = dn_pre * r;
            }
            gb.iter_mut().zip(&dgh).for_each(|(a, b)| *a += b);
            for i in 0..h {
                let hp = saved.h_prev[base + i];
                let wr = &w[i * three_h..(i + 1) * three_h];
                let mut acc = 0.0;
                for k in 0..three_h {
                    gw[i * three_h + k] += hp * dgh[k];
                    acc += wr[k] * dgh[k];
                }
                carry[i] += acc;
            }
        }
        if self.nodes[xproj].requires_grad {
            add_into(grads, xproj, &gx);
        }
        if self.nodes[w_hh].requires_grad {
            add_into(grads, w_hh, &gw);
        }
        if self.nodes[b_hh].requires_grad {
            add_into(grads, b_hh, &gb);
        }
    }
}
