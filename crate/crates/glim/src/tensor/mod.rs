//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse, accumulating gradients additively across fan-out.
//! The element type is generic: `f32` for training, `f64` for
//! finite-difference gradient checks (see [`gradcheck`]).
//!
//! Reductions run in a fixed sequential order, so results are bit-reproducible
//! for a given seed on a given machine.

pub mod gradcheck;

use thiserror::Error;

use crate::rng::Rng;

/// Element type of a tape: `f32` or `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataShape { len: usize, shape: Vec<usize> },
    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("target id {id} out of range (vocab {vocab}) at position {position}")]
    TargetOutOfRange {
        id: usize,
        vocab: usize,
        position: usize,
    },
    #[error("row index {index} out of range ({rows} rows) at position {position}")]
    RowOutOfRange {
        index: usize,
        rows: usize,
        position: usize,
    },
    #[error("slice [{start}, {end}) out of bounds for dimension of size {dim}")]
    SliceOutOfBounds { start: usize, end: usize, dim: usize },
    #[error("cross entropy requires at least one unmasked position")]
    AllMasked,
    #[error("dropout probability {p} must lie in [0, 1)")]
    BadDropout { p: f64 },
    #[error("concat requires at least one operand")]
    EmptyConcat,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<S> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Gelu { x: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Exp { x: TensorId },
    Dropout { x: TensorId, mask: Vec<S> },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, counted: Vec<bool> },
    Gather { table: TensorId, ids: Vec<usize> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    Transpose { x: TensorId },
    RowNormalize { x: TensorId },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// Records a forward computation and replays the chain rule in reverse.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[inline]
fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// C = C + A·B for row-major A[m×k], B[k×n].
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

fn transpose_raw<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Right-aligned broadcast of `b` onto `a`. Returns the output shape or an error.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Maps a flat index in `out_shape` to the flat index in `src_shape`
/// (right-aligned, size-1 dims repeat).
fn broadcast_src_index(flat: usize, out_shape: &[usize], src_padded: &[usize]) -> usize {
    let mut rem = flat;
    let mut src = 0;
    let mut stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        let c = if src_padded[d] == 1 { 0 } else { coord };
        src += c * stride;
        stride *= src_padded[d];
    }
    src
}

/// Sums `grad` (of `out_shape`) back down to `target_shape`.
fn reduce_to_shape<S: Scalar>(grad: &[S], out_shape: &[usize], target_shape: &[usize]) -> Vec<S> {
    if out_shape == target_shape {
        return grad.to_vec();
    }
    let padded = pad_shape(target_shape, out_shape.len());
    let mut out = vec![S::ZERO; numel(target_shape)];
    for (flat, &g) in grad.iter().enumerate() {
        let idx = broadcast_src_index(flat, out_shape, &padded);
        out[idx] = out[idx] + g;
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Adds an input tensor. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(TensorError::DataShape { len: data.len(), shape });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Convenience: leaf from f64 values.
    pub fn leaf_from_f64(&mut self, data: &[f64], shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        self.leaf(data.iter().map(|&x| S::from_f64(x)).collect(), shape, requires_grad)
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, needs_grad: bool, op: Op<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn child_needs_grad(&self, parents: &[TensorId]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        matmul_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.child_needs_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], ng, Op::MatMul { a, b }))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        if self.shape(a) == out_shape.as_slice() && db.len() == 1 {
            // scalar rhs
            let bv = db[0];
            out.extend(da.iter().map(|&av| f(av, bv)));
        } else if self.shape(a) == out_shape.as_slice() && da.len() % db.len() == 0 && {
            let tail = &out_shape[out_shape.len() - self.shape(b).len()..];
            tail == self.shape(b)
        } {
            // rhs tiles the trailing dims of lhs (e.g. bias add)
            let bl = db.len();
            for (i, &av) in da.iter().enumerate() {
                out.push(f(av, db[i % bl]));
            }
        } else {
            let pa = pad_shape(self.shape(a), out_shape.len());
            let pb = pad_shape(self.shape(b), out_shape.len());
            for flat in 0..n {
                let av = da[broadcast_src_index(flat, &out_shape, &pa)];
                let bv = db[broadcast_src_index(flat, &out_shape, &pb)];
                out.push(f(av, bv));
            }
        }
        let ng = self.child_needs_grad(&[a, b]);
        Ok(self.push(out, out_shape, ng, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        let data: Vec<S> = self.data(x).iter().map(|&v| v * cs).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.child_needs_grad(&[x]);
        self.push(data, shape, ng, Op::Scale { x, c })
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(S) -> S, op: Op<S>) -> TensorId {
        let data: Vec<S> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.child_needs_grad(&[x]);
        self.push(data, shape, ng, op)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        // tanh approximation (GPT-2 convention)
        self.unary(x, gelu_fwd, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| S::ONE / (S::ONE + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors by
    /// 1/(1−p). `p == 0` is the identity. Eval-mode forward passes simply do
    /// not record this op.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout { p });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.data(x).len())
            .map(|_| if rng.flip(p) { S::ZERO } else { keep })
            .collect();
        let data: Vec<S> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(data, shape, ng, Op::Dropout { x, mask }))
    }

    /// Softmax along `axis`, with the axis max subtracted before
    /// exponentiation so large logits stay finite.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![S::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max = src[at(0)];
                for j in 1..axis_len {
                    if src[at(j)] > max {
                        max = src[at(j)];
                    }
                }
                let mut sum = S::ZERO;
                for j in 0..axis_len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..axis_len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(out, shape, ng, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on rank-0 tensor");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = src.len() / d;
        let mut out = vec![S::ZERO; src.len()];
        let inv_d = S::from_f64(1.0 / d as f64);
        let eps_s = S::from_f64(eps);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = S::ONE / (var + eps_s).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let ng = self.child_needs_grad(&[x, gain, bias]);
        Ok(self.push(out, self.shape(x).to_vec(), ng, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean negative log-likelihood of `targets` under `logits` rows.
    /// Positions where `ignore` is true are excluded from the mean.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        ignore: Option<&[bool]>,
    ) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let (rows, vocab) = (shape[0], shape[1]);
        let counted: Vec<bool> = match ignore {
            Some(m) => m.iter().map(|&x| !x).collect(),
            None => vec![true; rows],
        };
        let n_counted = counted.iter().filter(|&&c| c).count();
        if n_counted == 0 {
            return Err(TensorError::AllMasked);
        }
        for (position, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, vocab, position });
            }
        }
        let src = self.data(logits);
        let mut total = S::ZERO;
        for r in 0..rows {
            if !counted[r] {
                continue;
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::ZERO;
            for &v in row {
                sum = sum + (v - max).exp();
            }
            let log_prob = row[targets[r]] - max - sum.ln();
            total = total - log_prob;
        }
        let loss = total * S::from_f64(1.0 / n_counted as f64);
        let ng = self.child_needs_grad(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                counted,
            },
        ))
    }

    /// Row lookup: `table[ids[i], :]` stacked into a new matrix.
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        for (position, &ix) in ids.iter().enumerate() {
            if ix >= rows {
                return Err(TensorError::RowOutOfRange { index: ix, rows, position });
            }
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &ix in ids {
            out.extend_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let ng = self.child_needs_grad(&[table]);
        Ok(self.push(out, vec![ids.len(), d], ng, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        if shape.len() != 2 || start + len > rows {
            return Err(TensorError::SliceOutOfBounds { start, end: start + len, dim: rows });
        }
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(data, vec![len, cols], ng, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        if shape.len() != 2 || start + len > cols {
            return Err(TensorError::SliceOutOfBounds { start, end: start + len, dim: cols });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(out, vec![rows, len], ng, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyConcat);
        };
        let cols = self.shape(first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let ng = self.child_needs_grad(parts);
        Ok(self.push(data, vec![rows, cols], ng, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyConcat);
        };
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.shape(p)[1];
                let src = self.data(p);
                data.extend_from_slice(&src[r * pc..(r + 1) * pc]);
            }
        }
        let ng = self.child_needs_grad(parts);
        Ok(self.push(data, vec![rows, cols], ng, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let data = transpose_raw(self.data(x), shape[0], shape[1]);
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(data, vec![shape[1], shape[0]], ng, Op::Transpose { x }))
    }

    /// L2-normalizes each row to unit length.
    pub fn row_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_normalize",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.data(x);
        let mut out = vec![S::ZERO; src.len()];
        let floor = S::from_f64(1e-30);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut sq = S::ZERO;
            for &v in row {
                sq = sq + v * v;
            }
            let mut norm = sq.sqrt();
            if !(norm > floor) {
                norm = floor;
            }
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        let ng = self.child_needs_grad(&[x]);
        Ok(self.push(out, shape, ng, Op::RowNormalize { x }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Runs reverse-mode accumulation from `root` (seeded with ones).
    /// Visits each node exactly once, in reverse recording order.
    pub fn backward(&mut self, root: TensorId) {
        let n = self.nodes.len();
        let mut reached = vec![false; n];
        reached[root.0] = true;
        {
            let node = &mut self.nodes[root.0];
            node.grad = Some(vec![S::ONE; node.data.len()]);
        }
        for i in (0..=root.0).rev() {
            if !reached[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad, &mut reached);
            self.nodes[i].grad = Some(grad);
        }
    }

    fn accumulate(&mut self, target: TensorId, delta: &[S], reached: &mut [bool]) {
        let node = &mut self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        reached[target.0] = true;
        let grad = node.grad.get_or_insert_with(|| vec![S::ZERO; node.data.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&mut self, i: usize, grad: &[S], reached: &mut [bool]) {
        // Ops are moved out and restored to appease the borrow checker cheaply.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.data(*b), k, n);
                    let mut da = vec![S::ZERO; m * k];
                    matmul_acc(grad, &bt, m, n, k, &mut da);
                    self.accumulate(*a, &da, reached);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.data(*a), m, k);
                    let mut db = vec![S::ZERO; k * n];
                    matmul_acc(&at, grad, k, m, n, &mut db);
                    self.accumulate(*b, &db, reached);
                }
            }
            Op::Add { a, b } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                if self.needs(*a) {
                    let da = reduce_to_shape(grad, &out_shape, &self.shape(*a).to_vec());
                    self.accumulate(*a, &da, reached);
                }
                if self.needs(*b) {
                    let db = reduce_to_shape(grad, &out_shape, &self.shape(*b).to_vec());
                    self.accumulate(*b, &db, reached);
                }
            }
            Op::Sub { a, b } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                if self.needs(*a) {
                    let da = reduce_to_shape(grad, &out_shape, &self.shape(*a).to_vec());
                    self.accumulate(*a, &da, reached);
                }
                if self.needs(*b) {
                    let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                    let db = reduce_to_shape(&neg, &out_shape, &self.shape(*b).to_vec());
                    self.accumulate(*b, &db, reached);
                }
            }
            Op::Mul { a, b } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                let pa = pad_shape(self.shape(*a), out_shape.len());
                let pb = pad_shape(self.shape(*b), out_shape.len());
                if self.needs(*a) {
                    let db_src = self.data(*b);
                    let full: Vec<S> = grad
                        .iter()
                        .enumerate()
                        .map(|(flat, &g)| g * db_src[broadcast_src_index(flat, &out_shape, &pb)])
                        .collect();
                    let da = reduce_to_shape(&full, &out_shape, &self.shape(*a).to_vec());
                    self.accumulate(*a, &da, reached);
                }
                if self.needs(*b) {
                    let da_src = self.data(*a);
                    let full: Vec<S> = grad
                        .iter()
                        .enumerate()
                        .map(|(flat, &g)| g * da_src[broadcast_src_index(flat, &out_shape, &pa)])
                        .collect();
                    let db = reduce_to_shape(&full, &out_shape, &self.shape(*b).to_vec());
                    self.accumulate(*b, &db, reached);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let cs = S::from_f64(*c);
                    let dx: Vec<S> = grad.iter().map(|&g| g * cs).collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let src = self.data(*x);
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(src)
                        .map(|(&g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let out = &self.nodes[i].data;
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &t)| g * (S::ONE - t * t))
                        .collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let out = &self.nodes[i].data;
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (S::ONE - s))
                        .collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let out = &self.nodes[i].data;
                    let dx: Vec<S> = grad.iter().zip(out).map(|(&g, &e)| g * e).collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx: Vec<S> = grad.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let out = &self.nodes[i].data;
                    let shape = self.nodes[i].shape.clone();
                    let axis_len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut dx = vec![S::ZERO; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + ii;
                            let mut dot = S::ZERO;
                            for j in 0..axis_len {
                                dot = dot + grad[at(j)] * out[at(j)];
                            }
                            for j in 0..axis_len {
                                dx[at(j)] = out[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let src = self.data(*x).to_vec();
                let g_data = self.data(*gain).to_vec();
                let d = *self.shape(*x).last().unwrap();
                let rows = src.len() / d;
                let inv_d = S::from_f64(1.0 / d as f64);
                let eps_s = S::from_f64(*eps);
                let mut dx = vec![S::ZERO; src.len()];
                let mut dgain = vec![S::ZERO; d];
                let mut dbias = vec![S::ZERO; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let g_row = &grad[r * d..(r + 1) * d];
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_d;
                    let mut var = S::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv_std = S::ONE / (var + eps_s).sqrt();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut sum_dxhat = S::ZERO;
                    let mut sum_dxhat_xhat = S::ZERO;
                    let mut dxhat = vec![S::ZERO; d];
                    for j in 0..d {
                        dgain[j] = dgain[j] + g_row[j] * xhat[j];
                        dbias[j] = dbias[j] + g_row[j];
                        dxhat[j] = g_row[j] * g_data[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = (dxhat[j] - sum_dxhat * inv_d - xhat[j] * sum_dxhat_xhat * inv_d) * inv_std;
                    }
                }
                if self.needs(*x) {
                    self.accumulate(*x, &dx, reached);
                }
                if self.needs(*gain) {
                    self.accumulate(*gain, &dgain, reached);
                }
                if self.needs(*bias) {
                    self.accumulate(*bias, &dbias, reached);
                }
            }
            Op::CrossEntropy { logits, targets, counted } => {
                if self.needs(*logits) {
                    let shape = self.shape(*logits).to_vec();
                    let (rows, vocab) = (shape[0], shape[1]);
                    let n_counted = counted.iter().filter(|&&c| c).count();
                    let src = self.data(*logits);
                    let g0 = grad[0] * S::from_f64(1.0 / n_counted as f64);
                    let mut dl = vec![S::ZERO; src.len()];
                    for r in 0..rows {
                        if !counted[r] {
                            continue;
                        }
                        let row = &src[r * vocab..(r + 1) * vocab];
                        let mut max = row[0];
                        for &v in &row[1..] {
                            if v > max {
                                max = v;
                            }
                        }
                        let mut sum = S::ZERO;
                        for &v in row {
                            sum = sum + (v - max).exp();
                        }
                        for c in 0..vocab {
                            let p = (row[c] - max).exp() / sum;
                            let onehot = if c == targets[r] { S::ONE } else { S::ZERO };
                            dl[r * vocab + c] = g0 * (p - onehot);
                        }
                    }
                    self.accumulate(*logits, &dl, reached);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![S::ZERO; self.data(*table).len()];
                    for (r, &ix) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] = dt[ix * d + j] + grad[r * d + j];
                        }
                    }
                    self.accumulate(*table, &dt, reached);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![S::ZERO; self.data(*x).len()];
                    dx[start * cols..start * cols + grad.len()].copy_from_slice(grad);
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let cols = self.shape(*x)[1];
                    let out_cols = self.nodes[i].shape[1];
                    let rows = self.shape(*x)[0];
                    let mut dx = vec![S::ZERO; self.data(*x).len()];
                    for r in 0..rows {
                        for j in 0..out_cols {
                            dx[r * cols + start + j] = grad[r * out_cols + j];
                        }
                    }
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        let dp = grad[offset..offset + len].to_vec();
                        self.accumulate(p, &dp, reached);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].shape[0];
                let total_cols = self.nodes[i].shape[1];
                let mut col_offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![S::ZERO; rows * pc];
                        for r in 0..rows {
                            for j in 0..pc {
                                dp[r * pc + j] = grad[r * total_cols + col_offset + j];
                            }
                        }
                        self.accumulate(p, &dp, reached);
                    }
                    col_offset += pc;
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let out_shape = &self.nodes[i].shape;
                    let dx = transpose_raw(grad, out_shape[0], out_shape[1]);
                    self.accumulate(*x, &dx, reached);
                }
            }
            Op::RowNormalize { x } => {
                if self.needs(*x) {
                    let src = self.data(*x);
                    let out = &self.nodes[i].data;
                    let d = self.nodes[i].shape[1];
                    let rows = self.nodes[i].shape[0];
                    let floor = S::from_f64(1e-30);
                    let mut dx = vec![S::ZERO; src.len()];
                    for r in 0..rows {
                        let xr = &src[r * d..(r + 1) * d];
                        let yr = &out[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mut sq = S::ZERO;
                        for &v in xr {
                            sq = sq + v * v;
                        }
                        let mut norm = sq.sqrt();
                        if !(norm > floor) {
                            norm = floor;
                        }
                        let mut dot = S::ZERO;
                        for j in 0..d {
                            dot = dot + gr[j] * yr[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    self.accumulate(*x, &dx, reached);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_fwd<S: Scalar>(v: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * v * (S::ONE + (c * (v + k * v * v * v)).tanh())
}

fn gelu_bwd<S: Scalar>(v: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three_k = S::from_f64(3.0 * 0.044715);
    let inner = c * (v + k * v * v * v);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * v * sech2 * c * (S::ONE + three_k * v * v)
}

#[cfg(test)]
mod tests;
