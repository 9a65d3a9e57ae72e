//! Reverse-mode differentiation on a linear tape of dense-tensor primitives.
//!
//! Forward calls record one op per primitive into a topologically ordered
//! tape; `backward` replays the tape in reverse and accumulates vector-Jacobian
//! products into per-node gradient buffers. Leaves may borrow their data
//! (parameters stay owned by the model, no per-step copies) or own it.
//!
//! A tape and its nodes are confined to one thread; tensors without a tape
//! attachment are immutable and freely shareable.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Storage<'a, E: Element> {
    Owned(Vec<E>),
    Borrowed(&'a [E]),
}

impl<'a, E: Element> Storage<'a, E> {
    fn as_slice(&self) -> &[E] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

struct Node<'a, E: Element> {
    shape: Vec<usize>,
    data: Storage<'a, E>,
    requires_grad: bool,
}

enum Op<E: Element> {
    Matmul { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, out: Var },
    AddRow { x: Var, row: Var, out: Var, cols: usize },
    Mul { a: Var, b: Var, out: Var },
    MulRow { x: Var, row: Var, out: Var, cols: usize },
    Scale { x: Var, out: Var, factor: E },
    SumAll { x: Var, out: Var },
    MeanAll { x: Var, out: Var },
    SumRows { x: Var, out: Var, cols: usize },
    MeanRows { x: Var, out: Var, rows: usize, cols: usize },
    Relu { x: Var, out: Var },
    Gelu { x: Var, out: Var },
    SoftmaxRows { x: Var, out: Var, cols: usize },
    LayerNormRows { x: Var, out: Var, cols: usize, inv_std: Vec<E> },
    Reshape { x: Var, out: Var },
    Transpose { x: Var, out: Var, rows: usize, cols: usize },
    ConcatRows { xs: Vec<Var>, out: Var, cols: usize, row_counts: Vec<usize> },
    ConcatCols { xs: Vec<Var>, out: Var, rows: usize, col_counts: Vec<usize> },
    SliceRows { x: Var, out: Var, r0: usize, rows_out: usize, cols: usize, rows_in: usize },
    SliceCols { x: Var, out: Var, c0: usize, cols_out: usize, rows: usize, cols_in: usize },
    GatherRows { table: Var, out: Var, indices: Vec<u32>, cols: usize },
    StopGradient,
}

pub struct Tape<'a, E: Element> {
    nodes: Vec<Node<'a, E>>,
    ops: Vec<Op<E>>,
    grads: Vec<Option<Vec<E>>>,
    consumed: bool,
    /// When set, every op output is scanned for NaN/Inf. Off in benchmarks.
    pub debug_checks: bool,
}

impl<'a, E: Element> Default for Tape<'a, E> {
    fn default() -> Self {
        Self::new()
    }
}

// Interpret a shape as (rows, cols) for row-wise ops: [d] acts as [1, d].
fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [d] => Some((1, *d)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<'a, E: Element> Tape<'a, E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            debug_checks: false,
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register a borrowed leaf. Parameters enter the tape this way so no
    /// per-step copies are made.
    pub fn leaf(&mut self, data: &'a [E], shape: &[usize], requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_node(shape.to_vec(), Storage::Borrowed(data), requires_grad)
    }

    /// Register an owned leaf (inputs, constants, test fixtures).
    pub fn leaf_owned(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_node(shape, Storage::Owned(t.into_data()), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf_owned(t, false)
    }

    pub fn value(&self, v: Var) -> &[E] {
        self.nodes[v.0].data.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Storage<'a, E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_output(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.debug_checks && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_node(shape, Storage::Owned(data), requires_grad))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// [m,k] @ [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(self.mismatch("matmul", a, b)),
        };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let v = self.push_output("matmul", vec![m, n], out, rg)?;
        self.ops.push(Op::Matmul { a, b, out: v, m, k, n });
        Ok(v)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let v = self.push_output("add", self.shape(a).to_vec(), out, rg)?;
        self.ops.push(Op::Add { a, b, out: v });
        Ok(v)
    }

    /// [n,d] + [d] broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) =
            rows_cols(self.shape(x)).ok_or_else(|| self.mismatch("add_row", x, row))?;
        if self.shape(row) != [cols] {
            return Err(self.mismatch("add_row", x, row));
        }
        let r = self.value(row);
        let out: Vec<E> = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(row);
        let v = self.push_output("add_row", self.shape(x).to_vec(), out, rg)?;
        let _ = rows;
        self.ops.push(Op::AddRow { x, row, out: v, cols });
        Ok(v)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let v = self.push_output("mul", self.shape(a).to_vec(), out, rg)?;
        self.ops.push(Op::Mul { a, b, out: v });
        Ok(v)
    }

    /// [n,d] * [d] broadcast over rows (layernorm gain, masks).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) =
            rows_cols(self.shape(x)).ok_or_else(|| self.mismatch("mul_row", x, row))?;
        if self.shape(row) != [cols] {
            return Err(self.mismatch("mul_row", x, row));
        }
        let r = self.value(row);
        let out: Vec<E> = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a * b))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(row);
        let v = self.push_output("mul_row", self.shape(x).to_vec(), out, rg)?;
        let _ = rows;
        self.ops.push(Op::MulRow { x, row, out: v, cols });
        Ok(v)
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Result<Var> {
        let out: Vec<E> = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.requires_grad(x);
        let v = self.push_output("scale", self.shape(x).to_vec(), out, rg)?;
        self.ops.push(Op::Scale { x, out: v, factor });
        Ok(v)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: E = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        let v = self.push_output("sum_all", vec![1], vec![s], rg)?;
        self.ops.push(Op::SumAll { x, out: v });
        Ok(v)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s: E = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        let v = self.push_output("mean_all", vec![1], vec![s / E::from_usize(n)], rg)?;
        self.ops.push(Op::MeanAll { x, out: v });
        Ok(v)
    }

    /// Sum over axis 0: [n,d] -> [d].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "sum_rows",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let mut out = vec![E::ZERO; cols];
        for r in self.value(x).chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let rg = self.requires_grad(x);
        let v = self.push_output("sum_rows", vec![cols], out, rg)?;
        let _ = rows;
        self.ops.push(Op::SumRows { x, out: v, cols });
        Ok(v)
    }

    /// Mean over axis 0: [n,d] -> [d].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "mean_rows",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let inv = E::ONE / E::from_usize(rows);
        let mut out = vec![E::ZERO; cols];
        for r in self.value(x).chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.requires_grad(x);
        let v = self.push_output("mean_rows", vec![cols], out, rg)?;
        self.ops.push(Op::MeanRows { x, out: v, rows, cols });
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let rg = self.requires_grad(x);
        let v = self.push_output("relu", self.shape(x).to_vec(), out, rg)?;
        self.ops.push(Op::Relu { x, out: v });
        Ok(v)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<E> = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.requires_grad(x);
        let v = self.push_output("gelu", self.shape(x).to_vec(), out, rg)?;
        self.ops.push(Op::Gelu { x, out: v });
        Ok(v)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "softmax",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let mut out = vec![E::ZERO; rows * cols];
        for (xr, or) in self
            .value(x)
            .chunks_exact(cols)
            .zip(out.chunks_exact_mut(cols))
        {
            let max = xr.iter().copied().fold(xr[0], |m, v| m.max_e(v));
            let mut denom = E::ZERO;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - max).exp();
                denom += *o;
            }
            let inv = E::ONE / denom;
            for o in or.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.requires_grad(x);
        let v = self.push_output("softmax", self.shape(x).to_vec(), out, rg)?;
        let _ = rows;
        self.ops.push(Op::SoftmaxRows { x, out: v, cols });
        Ok(v)
    }

    /// Row-wise normalization to zero mean / unit variance (no affine part;
    /// compose with `mul_row`/`add_row` for gain and bias).
    pub fn layernorm_rows(&mut self, x: Var, eps: E) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "layernorm",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let inv_n = E::ONE / E::from_usize(cols);
        let mut out = vec![E::ZERO; rows * cols];
        let mut inv_std = vec![E::ZERO; rows];
        for (i, (xr, or)) in self
            .value(x)
            .chunks_exact(cols)
            .zip(out.chunks_exact_mut(cols))
            .enumerate()
        {
            let mean: E = xr.iter().copied().sum::<E>() * inv_n;
            let mut var = E::ZERO;
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std[i] = istd;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - mean) * istd;
            }
        }
        let rg = self.requires_grad(x);
        let v = self.push_output("layernorm", self.shape(x).to_vec(), out, rg)?;
        let _ = rows;
        self.ops.push(Op::LayerNormRows { x, out: v, cols, inv_std });
        Ok(v)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        let v = self.push_output("reshape", shape, out, rg)?;
        self.ops.push(Op::Reshape { x, out: v });
        Ok(v)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(x) {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "transpose",
                    shape: self.shape(x).to_vec(),
                    reason: "expected 2-D".into(),
                })
            }
        };
        let mut out = vec![E::ZERO; rows * cols];
        transpose_into(self.value(x), &mut out, rows, cols);
        let rg = self.requires_grad(x);
        let v = self.push_output("transpose", vec![cols, rows], out, rg)?;
        self.ops.push(Op::Transpose { x, out: v, rows, cols });
        Ok(v)
    }

    /// Stack 2-D blocks along axis 0; all must share a column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty(), "concat_rows of zero tensors");
        let (_, cols) = rows_cols(self.shape(xs[0])).ok_or_else(|| Error::InvalidShape {
            op: "concat_rows",
            shape: self.shape(xs[0]).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let mut out = Vec::new();
        let mut row_counts = Vec::with_capacity(xs.len());
        let mut rg = false;
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x)).ok_or_else(|| self.mismatch("concat_rows", xs[0], x))?;
            if c != cols {
                return Err(self.mismatch("concat_rows", xs[0], x));
            }
            out.extend_from_slice(self.value(x));
            row_counts.push(r);
            rg |= self.requires_grad(x);
        }
        let total_rows: usize = row_counts.iter().sum();
        let v = self.push_output("concat_rows", vec![total_rows, cols], out, rg)?;
        self.ops.push(Op::ConcatRows { xs: xs.to_vec(), out: v, cols, row_counts });
        Ok(v)
    }

    /// Stack 2-D blocks along axis 1; all must share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty(), "concat_cols of zero tensors");
        let (rows, _) = rows_cols(self.shape(xs[0])).ok_or_else(|| Error::InvalidShape {
            op: "concat_cols",
            shape: self.shape(xs[0]).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        let mut col_counts = Vec::with_capacity(xs.len());
        let mut rg = false;
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x)).ok_or_else(|| self.mismatch("concat_cols", xs[0], x))?;
            if r != rows {
                return Err(self.mismatch("concat_cols", xs[0], x));
            }
            col_counts.push(c);
            rg |= self.requires_grad(x);
        }
        let total_cols: usize = col_counts.iter().sum();
        let mut out = vec![E::ZERO; rows * total_cols];
        let mut c0 = 0;
        for (&x, &c) in xs.iter().zip(&col_counts) {
            for (r, src) in self.value(x).chunks_exact(c).enumerate() {
                out[r * total_cols + c0..r * total_cols + c0 + c].copy_from_slice(src);
            }
            c0 += c;
        }
        let v = self.push_output("concat_cols", vec![rows, total_cols], out, rg)?;
        self.ops.push(Op::ConcatCols { xs: xs.to_vec(), out: v, rows, col_counts });
        Ok(v)
    }

    /// Rows [r0, r0+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, r0: usize, len: usize) -> Result<Var> {
        let (rows_in, cols) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "slice_rows",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        if r0 + len > rows_in {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: self.shape(x).to_vec(),
                reason: format!("rows [{r0}, {}) out of bounds", r0 + len),
            });
        }
        let out = self.value(x)[r0 * cols..(r0 + len) * cols].to_vec();
        let rg = self.requires_grad(x);
        let v = self.push_output("slice_rows", vec![len, cols], out, rg)?;
        self.ops.push(Op::SliceRows { x, out: v, r0, rows_out: len, cols, rows_in });
        Ok(v)
    }

    /// Columns [c0, c0+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, c0: usize, len: usize) -> Result<Var> {
        let (rows, cols_in) = rows_cols(self.shape(x)).ok_or_else(|| Error::InvalidShape {
            op: "slice_cols",
            shape: self.shape(x).to_vec(),
            reason: "expected 1-D or 2-D".into(),
        })?;
        if c0 + len > cols_in {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: self.shape(x).to_vec(),
                reason: format!("cols [{c0}, {}) out of bounds", c0 + len),
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols_in + c0..r * cols_in + c0 + len]);
        }
        let rg = self.requires_grad(x);
        let v = self.push_output("slice_cols", vec![rows, len], out, rg)?;
        self.ops.push(Op::SliceCols { x, out: v, c0, cols_out: len, rows, cols_in });
        Ok(v)
    }

    /// Row lookup into a [vocab, d] table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, indices: &[u32]) -> Result<Var> {
        let (vocab, cols) = match self.shape(table) {
            [v, c] => (*v, *c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "gather_rows",
                    shape: self.shape(table).to_vec(),
                    reason: "expected 2-D table".into(),
                })
            }
        };
        for &i in indices {
            if i as usize >= vocab {
                return Err(Error::UnknownToken { id: i as u16, vocab });
            }
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i as usize * cols..(i as usize + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        let v = self.push_output("gather_rows", vec![indices.len(), cols], out, rg)?;
        self.ops.push(Op::GatherRows { table, out: v, indices: indices.to_vec(), cols });
        Ok(v)
    }

    /// Identity forward; blocks all gradient flow to the input.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).to_vec();
        let v = self.push_output("stop_gradient", self.shape(x).to_vec(), out, false)?;
        self.ops.push(Op::StopGradient);
        Ok(v)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// on a path from a grad-requiring leaf to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..self.ops.len()).rev() {
            let op = &self.ops[idx];
            backward_op(&self.nodes, &mut self.grads, op);
        }
        Ok(())
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: usize, delta: &[E]) {
    match &mut grads[id] {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => grads[id] = Some(delta.to_vec()),
    }
}

// Accumulate with a closure producing the gradient in place, avoiding a
// temporary when the buffer does not exist yet.
fn with_grad_buf<E: Element>(
    grads: &mut [Option<Vec<E>>],
    id: usize,
    len: usize,
    f: impl FnOnce(&mut [E]),
) {
    if grads[id].is_none() {
        grads[id] = Some(vec![E::ZERO; len]);
    }
    f(grads[id].as_mut().expect("just initialized"));
}

fn backward_op<E: Element>(nodes: &[Node<E>], grads: &mut Vec<Option<Vec<E>>>, op: &Op<E>) {
    // All match arms follow the same pattern: skip when the output received
    // no gradient, then accumulate VJPs into inputs that require grad.
    match op {
        Op::Matmul { a, b, out, m, k, n } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].data.as_slice();
                with_grad_buf(grads, a.0, m * k, |da| {
                    matmul_nt(&d_out, bv, da, *m, *n, *k);
                });
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].data.as_slice();
                with_grad_buf(grads, b.0, k * n, |db| {
                    matmul_tn(av, &d_out, db, *m, *k, *n);
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Add { a, b, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[a.0].requires_grad {
                accumulate(grads, a.0, &d_out);
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, b.0, &d_out);
            }
            grads[out.0] = Some(d_out);
        }
        Op::AddRow { x, row, out, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                accumulate(grads, x.0, &d_out);
            }
            if nodes[row.0].requires_grad {
                with_grad_buf(grads, row.0, *cols, |dr| {
                    for chunk in d_out.chunks_exact(*cols) {
                        for (g, &d) in dr.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Mul { a, b, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].data.as_slice();
                with_grad_buf(grads, a.0, d_out.len(), |da| {
                    for ((g, &d), &v) in da.iter_mut().zip(&d_out).zip(bv) {
                        *g += d * v;
                    }
                });
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].data.as_slice();
                with_grad_buf(grads, b.0, d_out.len(), |db| {
                    for ((g, &d), &v) in db.iter_mut().zip(&d_out).zip(av) {
                        *g += d * v;
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::MulRow { x, row, out, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let rv = nodes[row.0].data.as_slice();
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for (dxr, dor) in dx.chunks_exact_mut(*cols).zip(d_out.chunks_exact(*cols)) {
                        for ((g, &d), &v) in dxr.iter_mut().zip(dor).zip(rv) {
                            *g += d * v;
                        }
                    }
                });
            }
            if nodes[row.0].requires_grad {
                let xv = nodes[x.0].data.as_slice();
                with_grad_buf(grads, row.0, *cols, |dr| {
                    for (dor, xr) in d_out.chunks_exact(*cols).zip(xv.chunks_exact(*cols)) {
                        for ((g, &d), &v) in dr.iter_mut().zip(dor).zip(xr) {
                            *g += d * v;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Scale { x, out, factor } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for (g, &d) in dx.iter_mut().zip(&d_out) {
                        *g += d * *factor;
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::SumAll { x, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let n = nodes[x.0].data.as_slice().len();
                let d = d_out[0];
                with_grad_buf(grads, x.0, n, |dx| {
                    for g in dx.iter_mut() {
                        *g += d;
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::MeanAll { x, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let n = nodes[x.0].data.as_slice().len();
                let d = d_out[0] / E::from_usize(n);
                with_grad_buf(grads, x.0, n, |dx| {
                    for g in dx.iter_mut() {
                        *g += d;
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::SumRows { x, out, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let n = nodes[x.0].data.as_slice().len();
                with_grad_buf(grads, x.0, n, |dx| {
                    for dxr in dx.chunks_exact_mut(*cols) {
                        for (g, &d) in dxr.iter_mut().zip(&d_out) {
                            *g += d;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::MeanRows { x, out, rows, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let n = nodes[x.0].data.as_slice().len();
                let inv = E::ONE / E::from_usize(*rows);
                with_grad_buf(grads, x.0, n, |dx| {
                    for dxr in dx.chunks_exact_mut(*cols) {
                        for (g, &d) in dxr.iter_mut().zip(&d_out) {
                            *g += d * inv;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Relu { x, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].data.as_slice();
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for ((g, &d), &v) in dx.iter_mut().zip(&d_out).zip(xv) {
                        if v > E::ZERO {
                            *g += d;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Gelu { x, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].data.as_slice();
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for ((g, &d), &v) in dx.iter_mut().zip(&d_out).zip(xv) {
                        *g += d * gelu_bwd(v);
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::SoftmaxRows { x, out, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let y = nodes[out.0].data.as_slice();
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for ((dxr, dor), yr) in dx
                        .chunks_exact_mut(*cols)
                        .zip(d_out.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                    {
                        let dot: E = dor.iter().zip(yr).map(|(&d, &v)| d * v).sum();
                        for ((g, &d), &v) in dxr.iter_mut().zip(dor).zip(yr) {
                            *g += v * (d - dot);
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::LayerNormRows { x, out, cols, inv_std } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                let y = nodes[out.0].data.as_slice();
                let inv_n = E::ONE / E::from_usize(*cols);
                with_grad_buf(grads, x.0, d_out.len(), |dx| {
                    for (i, ((dxr, dor), yr)) in dx
                        .chunks_exact_mut(*cols)
                        .zip(d_out.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                        .enumerate()
                    {
                        let mean_d: E = dor.iter().copied().sum::<E>() * inv_n;
                        let mean_dy: E = dor.iter().zip(yr).map(|(&d, &v)| d * v).sum::<E>() * inv_n;
                        let istd = inv_std[i];
                        for ((g, &d), &v) in dxr.iter_mut().zip(dor).zip(yr) {
                            *g += istd * (d - mean_d - v * mean_dy);
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::Reshape { x, out } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                accumulate(grads, x.0, &d_out);
            }
            grads[out.0] = Some(d_out);
        }
        Op::Transpose { x, out, rows, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                // d_out is [cols, rows]; transpose back to [rows, cols].
                with_grad_buf(grads, x.0, rows * cols, |dx| {
                    for j in 0..*cols {
                        for i in 0..*rows {
                            dx[i * cols + j] += d_out[j * rows + i];
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::ConcatRows { xs, out, cols, row_counts } => {
            let Some(d_out) = grads[out.0].take() else { return };
            let mut r0 = 0;
            for (&x, &r) in xs.iter().zip(row_counts) {
                if nodes[x.0].requires_grad {
                    accumulate(grads, x.0, &d_out[r0 * cols..(r0 + r) * cols]);
                }
                r0 += r;
            }
            grads[out.0] = Some(d_out);
        }
        Op::ConcatCols { xs, out, rows, col_counts } => {
            let Some(d_out) = grads[out.0].take() else { return };
            let total_cols: usize = col_counts.iter().sum();
            let mut c0 = 0;
            for (&x, &c) in xs.iter().zip(col_counts) {
                if nodes[x.0].requires_grad {
                    with_grad_buf(grads, x.0, rows * c, |dx| {
                        for r in 0..*rows {
                            for j in 0..c {
                                dx[r * c + j] += d_out[r * total_cols + c0 + j];
                            }
                        }
                    });
                }
                c0 += c;
            }
            grads[out.0] = Some(d_out);
        }
        Op::SliceRows { x, out, r0, rows_out, cols, rows_in } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                with_grad_buf(grads, x.0, rows_in * cols, |dx| {
                    for (g, &d) in dx[r0 * cols..(r0 + rows_out) * cols]
                        .iter_mut()
                        .zip(&d_out)
                    {
                        *g += d;
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::SliceCols { x, out, c0, cols_out, rows, cols_in } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[x.0].requires_grad {
                with_grad_buf(grads, x.0, rows * cols_in, |dx| {
                    for r in 0..*rows {
                        for j in 0..*cols_out {
                            dx[r * cols_in + c0 + j] += d_out[r * cols_out + j];
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::GatherRows { table, out, indices, cols } => {
            let Some(d_out) = grads[out.0].take() else { return };
            if nodes[table.0].requires_grad {
                let n = nodes[table.0].data.as_slice().len();
                with_grad_buf(grads, table.0, n, |dt| {
                    for (t, &i) in indices.iter().enumerate() {
                        let dst = &mut dt[i as usize * cols..(i as usize + 1) * cols];
                        for (g, &d) in dst.iter_mut().zip(&d_out[t * cols..(t + 1) * cols]) {
                            *g += d;
                        }
                    }
                });
            }
            grads[out.0] = Some(d_out);
        }
        Op::StopGradient => {}
    }
}

// ── Activation scalars ──────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline(always)]
fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x.powi(3));
    half * x * (E::ONE + u.tanh())
}

#[inline(always)]
fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x.powi(2))
}

// ── Matmul kernels ──────────────────────────────────────────────────────
// Cache-tiled with fixed block sizes (fixed summation order keeps runs
// bitwise reproducible). The row-block/column-tile structure streams the
// large operand exactly once even in the degenerate thin shapes the
// hypernet output heads produce ([1..16, d_e] against a very wide matrix).

const MB: usize = 16; // row block
const JB: usize = 16; // output-row block for the transposed kernel
const PB: usize = 8192; // dot-accumulation tile (fixed: it splits a reduction)

// Column-tile width sized so the live block (`rows` output rows of the tile)
// stays cache-resident while each streamed chunk of the wide operand remains
// long enough for prefetch. Depends only on the row count, so a given shape
// always tiles (and therefore rounds) identically.
fn col_tile(rows: usize) -> usize {
    (8192 / rows.max(1)).clamp(256, 32768)
}

#[inline(always)]
fn axpy<E: Element>(c: &mut [E], a: E, b: &[E]) {
    for (cj, &bj) in c.iter_mut().zip(b) {
        *cj = a.mul_add_e(bj, *cj);
    }
}

/// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn matmul_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let nb = col_tile(m.min(MB));
    let mut ib = 0;
    while ib < m {
        let ie = (ib + MB).min(m);
        let mut jb = 0;
        while jb < n {
            let je = (jb + nb).min(n);
            for kk in 0..k {
                let brow = &b[kk * n + jb..kk * n + je];
                for i in ib..ie {
                    let aik = a[i * k + kk];
                    axpy(&mut c[i * n + jb..i * n + je], aik, brow);
                }
            }
            jb = je;
        }
        ib = ie;
    }
}

/// c[m,q] += a[m,p] @ b[q,p]^T  (tiled dot products over the shared axis).
/// Output rows are processed in blocks of [`JB`] so the wide operand is read
/// as a small number of parallel sequential streams.
pub(crate) fn matmul_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(c.len(), m * q);
    let mut qb = 0;
    while qb < q {
        let qe = (qb + JB).min(q);
        let mut pb = 0;
        while pb < p {
            let pe = (pb + PB).min(p);
            for j in qb..qe {
                let brow = &b[j * p + pb..j * p + pe];
                for i in 0..m {
                    c[i * q + j] += dot(&a[i * p + pb..i * p + pe], brow);
                }
            }
            pb = pe;
        }
        qb = qe;
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n]
pub(crate) fn matmul_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let nb = col_tile(k);
    let mut jb = 0;
    while jb < n {
        let je = (jb + nb).min(n);
        for i in 0..m {
            let brow = &b[i * n + jb..i * n + je];
            for kk in 0..k {
                let aik = a[i * k + kk];
                axpy(&mut c[kk * n + jb..kk * n + je], aik, brow);
            }
        }
        jb = je;
    }
}

/// Sixteen-lane unrolled dot product; fixed summation order for determinism.
#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::ZERO; 16];
    for (ca, cb) in a.chunks_exact(16).zip(b.chunks_exact(16)) {
        for l in 0..16 {
            acc[l] = ca[l].mul_add_e(cb[l], acc[l]);
        }
    }
    let rem = a.len() - a.len() % 16;
    let mut tail = E::ZERO;
    for (&x, &y) in a[rem..].iter().zip(&b[rem..]) {
        tail = x.mul_add_e(y, tail);
    }
    let mut lanes = E::ZERO;
    for l in 0..16 {
        lanes += acc[l];
    }
    lanes + tail
}

pub(crate) fn transpose_into<E: Element>(src: &[E], dst: &mut [E], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

// ── Composite losses ────────────────────────────────────────────────────

/// Mean of squared elementwise differences over all elements.
pub fn mse_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let neg_t = tape.scale(target, -E::ONE)?;
    let diff = tape.add(pred, neg_t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Sum of mask-weighted squared differences; caller divides by the mask count.
/// Used for chunk targets whose tail entries fall past the episode end.
pub fn masked_sq_err_sum<E: Element>(
    tape: &mut Tape<E>,
    pred: Var,
    target: Var,
    mask: Var,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred) != tape.shape(mask) {
        return Err(Error::ShapeMismatch {
            op: "masked_sq_err_sum",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let neg_t = tape.scale(target, -E::ONE)?;
    let diff = tape.add(pred, neg_t)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, mask)?;
    tape.sum_all(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    /// Central finite differences against backward(), elementwise relative
    /// error. The builder must be a pure function of its leaf values.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let eps = 1e-4;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf_owned(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();

        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed
                .iter()
                .map(|x| t.leaf_owned(x.clone(), true))
                .collect();
            let l = build(&mut t, &vs);
            t.value(l)[0]
        };

        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = if analytic[i].is_empty() {
                    0.0
                } else {
                    analytic[i][j]
                };
                let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
                assert!(
                    ((a - numeric) / denom).abs() < tol,
                    "input {i} elem {j}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut rng = seeded_rng(7, 0);
        let a = randn(vec![3, 3], &mut rng);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.constant(a.clone());
        let vi = tape.constant(eye);
        let out = tape.matmul(vi, va).unwrap();
        assert_eq!(tape.value(out), a.data());
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_three_point() {
        // Direct mean/variance computation: [1,2,3] -> [-sqrt(3/2), 0, sqrt(3/2)].
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.layernorm_rows(x, 0.0).unwrap();
        let expect = (1.5f64).sqrt();
        let got = tape.value(y);
        assert!((got[0] + expect).abs() < 1e-12, "{got:?}");
        assert!(got[1].abs() < 1e-12);
        assert!((got[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_nonneg_sum_one() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 1);
            let x = randn(vec![4, 9], &mut rng);
            let mut tape: Tape<f64> = Tape::new();
            let v = tape.constant(x);
            let y = tape.softmax_rows(v).unwrap();
            for row in tape.value(y).chunks_exact(9) {
                assert!(row.iter().all(|&p| p >= 0.0));
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn layernorm_rows_mean_zero_var_one() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 2);
            let x = randn(vec![5, 16], &mut rng);
            let mut tape: Tape<f64> = Tape::new();
            let v = tape.constant(x);
            let y = tape.layernorm_rows(v, 0.0).unwrap();
            for row in tape.value(y).chunks_exact(16) {
                let mean: f64 = row.iter().sum::<f64>() / 16.0;
                let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_square() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_of_layernorm_is_zero() {
        // Layernorm output sums to zero regardless of input, so the gradient
        // of sum(layernorm(x)) vanishes.
        let mut rng = seeded_rng(11, 3);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf_owned(randn(vec![8], &mut rng), true);
        let y = tape.layernorm_rows(x, 1e-5).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-9, "grad {g}");
        }
    }

    #[test]
    fn fd_matmul_chain() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 4);
            let a = randn(vec![3, 4], &mut rng);
            let b = randn(vec![4, 2], &mut rng);
            fd_check(
                &[a, b],
                |t, v| {
                    let c = t.matmul(v[0], v[1]).unwrap();
                    t.mean_all(c).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn fd_elementwise_and_rows() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 5);
            let x = randn(vec![3, 5], &mut rng);
            let y = randn(vec![3, 5], &mut rng);
            let row = randn(vec![5], &mut rng);
            fd_check(
                &[x, y, row],
                |t, v| {
                    let s = t.add(v[0], v[1]).unwrap();
                    let m = t.mul(s, v[0]).unwrap();
                    let br = t.add_row(m, v[2]).unwrap();
                    let mr = t.mul_row(br, v[2]).unwrap();
                    let sc = t.scale(mr, 0.7).unwrap();
                    let sr = t.sum_rows(sc).unwrap();
                    let mr2 = t.mean_rows(sr).unwrap();
                    t.sum_all(mr2).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn fd_activations() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 6);
            // Keep relu test points away from the kink at zero.
            let x = Tensor::from_fn(vec![12], |_| {
                let v: f64 = rng.sample(StandardNormal);
                if v.abs() < 1e-2 {
                    v + 0.05
                } else {
                    v
                }
            });
            fd_check(
                &[x.clone()],
                |t, v| {
                    let r = t.relu(v[0]).unwrap();
                    t.mean_all(r).unwrap()
                },
                1e-4,
            );
            fd_check(
                &[x],
                |t, v| {
                    let g = t.gelu(v[0]).unwrap();
                    t.mean_all(g).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn fd_softmax_layernorm() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 7);
            let x = randn(vec![3, 6], &mut rng);
            let w = randn(vec![6], &mut rng);
            fd_check(
                &[x.clone(), w.clone()],
                |t, v| {
                    let y = t.softmax_rows(v[0]).unwrap();
                    let z = t.mul_row(y, v[1]).unwrap();
                    t.mean_all(z).unwrap()
                },
                1e-4,
            );
            fd_check(
                &[x, w],
                |t, v| {
                    let y = t.layernorm_rows(v[0], 1e-5).unwrap();
                    let z = t.mul_row(y, v[1]).unwrap();
                    t.mean_all(z).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn fd_shape_ops() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 8);
            let a = randn(vec![3, 4], &mut rng);
            let b = randn(vec![2, 4], &mut rng);
            fd_check(
                &[a.clone(), b.clone()],
                |t, v| {
                    let cat = t.concat_rows(&[v[0], v[1]]).unwrap();
                    let tr = t.transpose(cat).unwrap();
                    let sl = t.slice_rows(tr, 1, 2).unwrap();
                    let rs = t.reshape(sl, vec![10]).unwrap();
                    t.mean_all(rs).unwrap()
                },
                1e-4,
            );
            let c = randn(vec![3, 2], &mut rng);
            fd_check(
                &[a, c],
                |t, v| {
                    let ct = t.concat_cols(&[v[0], v[1]]).unwrap();
                    let sc = t.slice_cols(ct, 2, 4).unwrap();
                    t.mean_all(sc).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn fd_gather_rows() {
        for seed in 0..10 {
            let mut rng = seeded_rng(seed, 9);
            let table = randn(vec![6, 3], &mut rng);
            fd_check(
                &[table],
                |t, v| {
                    let g = t.gather_rows(v[0], &[0, 2, 2, 5]).unwrap();
                    t.mean_all(g).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut rng = seeded_rng(3, 10);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf_owned(randn(vec![4], &mut rng), true);
        let y = tape.leaf_owned(randn(vec![4], &mut rng), true);
        let blocked = tape.stop_gradient(x).unwrap();
        let prod = tape.mul(blocked, y).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none(), "stop-gradient leaked into x");
        assert!(tape.grad(y).is_some());
    }

    #[test]
    fn mse_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let t0 = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let l = mse_loss(&mut tape, p, t0).unwrap();
        assert_eq!(tape.value(l), &[0.0]);

        let p2 = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let t2 = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let l2 = mse_loss(&mut tape, p2, t2).unwrap();
        assert_eq!(tape.value(l2), &[2.0]);
    }

    #[test]
    fn mse_matches_scalar_loop_oracle() {
        for seed in 0..5 {
            let mut rng = seeded_rng(seed, 11);
            let p = randn(vec![4, 6], &mut rng);
            let t = randn(vec![4, 6], &mut rng);
            let mut expected = 0.0;
            for (a, b) in p.data().iter().zip(t.data()) {
                expected += (a - b) * (a - b);
            }
            expected /= 24.0;
            let mut tape: Tape<f64> = Tape::new();
            let vp = tape.constant(p);
            let vt = tape.constant(t);
            let l = mse_loss(&mut tape, vp, vt).unwrap();
            assert!((tape.value(l)[0] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_use() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf_owned(Tensor::zeros(vec![3]), true);
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn debug_checks_catch_non_finite() {
        let mut tape: Tape<f64> = Tape::new();
        tape.debug_checks = true;
        let x = tape.constant(Tensor::new(vec![2], vec![1e308, 1e308]).unwrap());
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || -> Vec<f32> {
            let mut rng = seeded_rng(42, 12);
            let x: Tensor<f32> = Tensor::from_fn(vec![7, 9], |_| {
                let v: f64 = rng.sample(StandardNormal);
                v as f32
            });
            let w: Tensor<f32> = Tensor::from_fn(vec![9, 5], |_| {
                let v: f64 = rng.sample(StandardNormal);
                v as f32
            });
            let mut tape: Tape<f32> = Tape::new();
            let vx = tape.constant(x);
            let vw = tape.constant(w);
            let h = tape.matmul(vx, vw).unwrap();
            let g = tape.gelu(h).unwrap();
            let n = tape.layernorm_rows(g, 1e-5).unwrap();
            let s = tape.softmax_rows(n).unwrap();
            tape.value(s).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

}
