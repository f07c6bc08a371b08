//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every piece of model math in this crate is expressed through [`Tape`]
//! operations so that one `backward` call yields gradients for all learnable
//! parameters. The tape is a Wengert list: ops are recorded in forward order
//! and replayed in reverse. Tensors are immutable once registered; gradients
//! accumulate in per-node buffers owned by the tape.
//!
//! Scope is deliberately small: 2-D matrices (plus 1-D vectors for norm
//! gains/biases), CPU only, no broadcasting beyond the few ops the model
//! needs. All arithmetic is sequential f64, so identical inputs produce
//! bit-identical outputs.

pub mod gradcheck;

use thiserror::Error;

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("tensor values length {got} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape; record a new forward pass first")]
    TapeConsumed,
    #[error("mask length {mask} does not match dimension {dim}")]
    MaskLength { mask: usize, dim: usize },
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    /// 2-D matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        assert!(r > 0, "from_rows: no rows");
        let c = rows[0].len();
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "from_rows: ragged rows");
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values).expect("consistent shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("consistent shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("consistent shape")
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values).expect("consistent shape")
    }

    /// Marks this tensor as a differentiation leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer, populated by [`Tape::backward`] for leaves that
    /// require grad.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Row count when 2-D, 1 for vectors/scalars.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count when 2-D, length for vectors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn ensure_grad_buffer(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
        self.grad.as_deref_mut().expect("just allocated")
    }
}

/// Handle to a tensor registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: Var, b: Var, out: Var },
    RowSoftmax { input: Var, mask: Option<Vec<bool>>, out: Var },
    LayerNorm { input: Var, gain: Var, bias: Var, out: Var },
    Relu { input: Var, out: Var },
    Softplus { input: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    AddRowBroadcast { a: Var, bias: Var, out: Var },
    Scale { input: Var, factor: f64, out: Var },
    ScaleRows { input: Var, out: Var, factors: Vec<f64> },
    Transpose { input: Var, out: Var },
    ConcatRows { inputs: Vec<Var>, out: Var },
    ConcatCols { a: Var, b: Var, out: Var },
    SliceCols { input: Var, start: usize, len: usize, out: Var },
    PadRows { input: Var, total_rows: usize, out: Var },
    MeanRows { input: Var, out: Var },
    MeanAll { input: Var, out: Var },
    Mse { a: Var, b: Var, out: Var },
    Mae { a: Var, b: Var, out: Var },
    MaskedRowMse { a: Var, b: Var, row_mask: Vec<bool>, out: Var },
}

/// Wengert tape: records ops on forward, replays them in reverse on
/// [`Tape::backward`]. One backward per tape; a second call is rejected.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a leaf tensor. Its `requires_grad` flag decides whether
    /// `backward` populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, needs)
    }

    /// Registers an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, false)
    }

    fn push(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(t);
        self.needs_grad.push(needs_grad);
        id
    }

    fn result(&mut self, t: Tensor, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad[p.0]);
        self.push(t, needs)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(self.nodes[v.0].is_scalar());
        self.nodes[v.0].values[0]
    }

    /// Gradient of a node after `backward`. `None` when no gradient flowed
    /// to it (or it was registered as a constant).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.values, &tb.values, r, k, c);
        let t = Tensor::new(vec![r, c], out).expect("consistent shape");
        let v = self.result(t, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out: v });
        Ok(v)
    }

    /// Row-wise softmax with optional column mask. Masked columns get zero
    /// probability; a fully masked row yields an all-zero row rather than a
    /// distribution.
    pub fn row_softmax_masked(
        &mut self,
        input: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let t = &self.nodes[input.0];
        let (r, c) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.len() != c {
                return Err(TensorError::MaskLength {
                    mask: m.len(),
                    dim: c,
                });
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.values[i * c..(i + 1) * c];
            softmax_row(row, mask, &mut out[i * c..(i + 1) * c]);
        }
        let tensor = Tensor::new(t.shape.clone(), out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::RowSoftmax {
            input,
            mask: mask.map(<[bool]>::to_vec),
            out: v,
        });
        Ok(v)
    }

    pub fn row_softmax(&mut self, input: Var) -> Var {
        self.row_softmax_masked(input, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Per-row standardization followed by per-column affine: rows are
    /// shifted to zero mean and unit variance (eps-guarded), then scaled by
    /// `gain` and shifted by `bias`, both of length `cols`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[input.0];
        if t.shape.len() != 2 || t.shape[1] < 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: t.shape.clone(),
                reason: "requires a 2-D input with at least 2 columns".into(),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        for p in [gain, bias] {
            if self.nodes[p.0].numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let (tv, g, b) = (
            &self.nodes[input.0].values,
            &self.nodes[gain.0].values,
            &self.nodes[bias.0].values,
        );
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tv[i * c..(i + 1) * c];
            let (mean, inv_std) = row_mean_inv_std(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let tensor = Tensor::new(vec![r, c], out).expect("consistent shape");
        let v = self.result(tensor, &[input, gain, bias]);
        self.ops.push(Op::LayerNorm {
            input,
            gain,
            bias,
            out: v,
        });
        Ok(v)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = &self.nodes[input.0];
        let out: Vec<f64> = t.values.iter().map(|&x| x.max(0.0)).collect();
        let tensor = Tensor::new(t.shape.clone(), out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::Relu { input, out: v });
        v
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        let t = &self.nodes[input.0];
        let out: Vec<f64> = t.values.iter().map(|&x| softplus_stable(x)).collect();
        let tensor = Tensor::new(t.shape.clone(), out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::Softplus { input, out: v });
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let out: Vec<f64> = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tensor = Tensor::new(ta.shape.clone(), out).expect("consistent shape");
        let v = self.result(tensor, &[a, b]);
        self.ops.push(make(a, b, v));
        Ok(v)
    }

    /// Adds a length-`cols` bias vector to every row of a 2-D tensor.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        if ta.shape.len() != 2 || tb.numel() != ta.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut out = ta.values.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tb.values[j];
            }
        }
        let tensor = Tensor::new(vec![r, c], out).expect("consistent shape");
        let v = self.result(tensor, &[a, bias]);
        self.ops.push(Op::AddRowBroadcast { a, bias, out: v });
        Ok(v)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let t = &self.nodes[input.0];
        let out: Vec<f64> = t.values.iter().map(|&x| x * factor).collect();
        let tensor = Tensor::new(t.shape.clone(), out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::Scale {
            input,
            factor,
            out: v,
        });
        v
    }

    /// Multiplies row `i` of a 2-D tensor by the constant `factors[i]`.
    pub fn scale_rows(&mut self, input: Var, factors: &[f64]) -> Result<Var, TensorError> {
        let t = &self.nodes[input.0];
        if t.shape.len() != 2 || t.shape[0] != factors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape.clone(),
                rhs: vec![factors.len()],
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(t.values[i * c + j] * factors[i]);
            }
        }
        let tensor = Tensor::new(vec![r, c], out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::ScaleRows {
            input,
            out: v,
            factors: factors.to_vec(),
        });
        Ok(v)
    }

    pub fn transpose(&mut self, input: Var) -> Var {
        let t = &self.nodes[input.0];
        debug_assert_eq!(t.shape.len(), 2, "transpose requires matrix");
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.values[i * c + j];
            }
        }
        let tensor = Tensor::new(vec![c, r], out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::Transpose { input, out: v });
        v
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        assert!(!inputs.is_empty(), "concat_rows: no inputs");
        let c = self.nodes[inputs[0].0].cols();
        let mut total_rows = 0;
        for &v in inputs {
            let t = &self.nodes[v.0];
            if t.shape.len() != 2 || t.shape[1] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[inputs[0].0].shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            total_rows += t.shape[0];
        }
        let mut out = Vec::with_capacity(total_rows * c);
        for &v in inputs {
            out.extend_from_slice(&self.nodes[v.0].values);
        }
        let tensor = Tensor::new(vec![total_rows, c], out).expect("consistent shape");
        let v = self.result(tensor, inputs);
        self.ops.push(Op::ConcatRows {
            inputs: inputs.to_vec(),
            out: v,
        });
        Ok(v)
    }

    /// Joins two 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[0] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, ca, cb) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&ta.values[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&tb.values[i * cb..(i + 1) * cb]);
        }
        let tensor = Tensor::new(vec![r, ca + cb], out).expect("consistent shape");
        let v = self.result(tensor, &[a, b]);
        self.ops.push(Op::ConcatCols { a, b, out: v });
        Ok(v)
    }

    /// Extracts columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[input.0];
        if t.shape.len() != 2 || start + len > t.shape[1] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: t.shape.clone(),
                reason: format!("slice [{start}, {})", start + len),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.values[i * c + start..i * c + start + len]);
        }
        let tensor = Tensor::new(vec![r, len], out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::SliceCols {
            input,
            start,
            len,
            out: v,
        });
        Ok(v)
    }

    /// Appends zero rows until the tensor has `total_rows` rows.
    pub fn pad_rows(&mut self, input: Var, total_rows: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[input.0];
        if t.shape.len() != 2 || t.shape[0] > total_rows {
            return Err(TensorError::InvalidShape {
                op: "pad_rows",
                shape: t.shape.clone(),
                reason: format!("cannot pad to {total_rows} rows"),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = t.values.clone();
        out.resize(total_rows * c, 0.0);
        let tensor = Tensor::new(vec![total_rows, c], out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        let _ = r;
        self.ops.push(Op::PadRows {
            input,
            total_rows,
            out: v,
        });
        Ok(v)
    }

    /// Column-wise mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, input: Var) -> Var {
        let t = &self.nodes[input.0];
        debug_assert_eq!(t.shape.len(), 2);
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.values[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let tensor = Tensor::new(vec![1, c], out).expect("consistent shape");
        let v = self.result(tensor, &[input]);
        self.ops.push(Op::MeanRows { input, out: v });
        v
    }

    /// Mean over all entries, producing a scalar.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let t = &self.nodes[input.0];
        let mean = t.values.iter().sum::<f64>() / t.numel() as f64;
        let v = self.result(Tensor::scalar(mean), &[input]);
        self.ops.push(Op::MeanAll { input, out: v });
        v
    }

    /// Mean squared error over all entries; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let n = ta.numel() as f64;
        let sum: f64 = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = self.result(Tensor::scalar(sum / n), &[a, b]);
        self.ops.push(Op::Mse { a, b, out: v });
        Ok(v)
    }

    /// Mean absolute error over all entries; scalar output.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mae",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let n = ta.numel() as f64;
        let sum: f64 = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let v = self.result(Tensor::scalar(sum / n), &[a, b]);
        self.ops.push(Op::Mae { a, b, out: v });
        Ok(v)
    }

    /// Mean squared error restricted to the rows where `row_mask` is true.
    /// With every row masked out the result is 0 (no supervision signal).
    pub fn masked_row_mse(
        &mut self,
        a: Var,
        b: Var,
        row_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape || ta.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_row_mse",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        if row_mask.len() != r {
            return Err(TensorError::MaskLength {
                mask: row_mask.len(),
                dim: r,
            });
        }
        let active = row_mask.iter().filter(|&&m| m).count();
        let value = if active == 0 {
            0.0
        } else {
            let mut sum = 0.0;
            for i in 0..r {
                if !row_mask[i] {
                    continue;
                }
                for j in 0..c {
                    let d = ta.values[i * c + j] - tb.values[i * c + j];
                    sum += d * d;
                }
            }
            sum / (active * c) as f64
        };
        let v = self.result(Tensor::scalar(value), &[a, b]);
        self.ops.push(Op::MaskedRowMse {
            a,
            b,
            row_mask: row_mask.to_vec(),
            out: v,
        });
        Ok(v)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradient buffers of every
    /// node on the path to a grad-requiring leaf. Errors on a non-scalar
    /// loss and on reuse of an already-consumed tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.nodes[loss.0].is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        // Every grad-requiring leaf ends up with a buffer, even when no
        // gradient flows to it (e.g. fully masked losses).
        for node in &mut self.nodes {
            if node.requires_grad {
                node.ensure_grad_buffer();
            }
        }
        self.nodes[loss.0].ensure_grad_buffer()[0] = 1.0;

        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn grad_of(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.clone()
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.needs_grad[v.0] {
            return;
        }
        let buf = self.nodes[v.0].ensure_grad_buffer();
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let c = self.nodes[b.0].shape[1];
                if self.needs_grad[a.0] {
                    // dA = g @ B^T
                    let bv = &self.nodes[b.0].values;
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                da[i * k + t] += gij * bv[t * c + j];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs_grad[b.0] {
                    // dB = A^T @ g
                    let av = &self.nodes[a.0].values;
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for t in 0..k {
                            let ait = av[i * k + t];
                            if ait == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                db[t * c + j] += ait * g[i * c + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::RowSoftmax { input, mask, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let t = &self.nodes[out.0];
                let (r, c) = (t.rows(), t.cols());
                let p = t.values.clone();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[base + j] * p[base + j];
                    }
                    for j in 0..c {
                        if mask.as_ref().is_some_and(|m| !m[j]) {
                            continue;
                        }
                        d[base + j] = p[base + j] * (g[base + j] - dot);
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                out,
            } => {
                let Some(g) = self.grad_of(*out) else { return };
                let x = self.nodes[input.0].values.clone();
                let gv = self.nodes[gain.0].values.clone();
                let (r, c) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_mean_inv_std(row);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let grow = &g[i * c..(i + 1) * c];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        let dxh = grow[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dxh = grow[j] * gv[j];
                        dx[i * c + j] =
                            inv_std * (dxh - sum_dxh / n - xhat[j] * sum_dxh_xh / n);
                    }
                }
                self.accumulate(*input, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Relu { input, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let x = &self.nodes[input.0].values;
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::Softplus { input, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let x = &self.nodes[input.0].values;
                let d: Vec<f64> = g.iter().zip(x).map(|(&gi, &xi)| gi * sigmoid(xi)).collect();
                self.accumulate(*input, &d);
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            Op::Sub { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                self.accumulate(*a, &g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::AddRowBroadcast { a, bias, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                self.accumulate(*a, &g);
                if self.needs_grad[bias.0] {
                    let c = self.nodes[bias.0].numel();
                    let r = self.nodes[a.0].shape[0];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale { input, factor, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let d: Vec<f64> = g.iter().map(|&v| v * factor).collect();
                self.accumulate(*input, &d);
            }
            Op::ScaleRows {
                input,
                out,
                factors,
            } => {
                let Some(g) = self.grad_of(*out) else { return };
                let c = self.nodes[input.0].shape[1];
                let mut d = vec![0.0; g.len()];
                for (i, &f) in factors.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = g[i * c + j] * f;
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::Transpose { input, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                // out is c×r; transpose the gradient back to r×c.
                let (c, r) = (self.nodes[out.0].shape[0], self.nodes[out.0].shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        d[j * c + i] = g[i * r + j];
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::ConcatRows { inputs, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].numel();
                    let d = g[offset..offset + n].to_vec();
                    self.accumulate(v, &d);
                    offset += n;
                }
            }
            Op::ConcatCols { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let (r, ca) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let cb = self.nodes[b.0].shape[1];
                let c = ca + cb;
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    da[i * ca..(i + 1) * ca].copy_from_slice(&g[i * c..i * c + ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&g[i * c + ca..(i + 1) * c]);
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::SliceCols {
                input,
                start,
                len,
                out,
            } => {
                let Some(g) = self.grad_of(*out) else { return };
                let (r, c) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(*input, &d);
            }
            Op::PadRows {
                input,
                total_rows: _,
                out,
            } => {
                let Some(g) = self.grad_of(*out) else { return };
                let n = self.nodes[input.0].numel();
                self.accumulate(*input, &g[..n].to_vec());
            }
            Op::MeanRows { input, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let (r, c) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j] / r as f64;
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::MeanAll { input, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let n = self.nodes[input.0].numel();
                let d = vec![g[0] / n as f64; n];
                self.accumulate(*input, &d);
            }
            Op::Mse { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let n = self.nodes[a.0].numel() as f64;
                let scale = 2.0 * g[0] / n;
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                let da: Vec<f64> = av
                    .iter()
                    .zip(&bv)
                    .map(|(&x, &y)| scale * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Mae { a, b, out } => {
                let Some(g) = self.grad_of(*out) else { return };
                let n = self.nodes[a.0].numel() as f64;
                let scale = g[0] / n;
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                let da: Vec<f64> = av
                    .iter()
                    .zip(&bv)
                    .map(|(&x, &y)| scale * sign(x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MaskedRowMse {
                a,
                b,
                row_mask,
                out,
            } => {
                let Some(g) = self.grad_of(*out) else { return };
                let active = row_mask.iter().filter(|&&m| m).count();
                if active == 0 {
                    return;
                }
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let scale = 2.0 * g[0] / (active * c) as f64;
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    if !row_mask[i] {
                        continue;
                    }
                    for j in 0..c {
                        da[i * c + j] = scale * (av[i * c + j] - bv[i * c + j]);
                    }
                }
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
        }
    }
}

// ── free helpers ─────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for t in 0..k {
            let ait = a[i * k + t];
            if ait == 0.0 {
                continue;
            }
            let brow = &b[t * c..(t + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += ait * brow[j];
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.is_some_and(|m| !m[j]) {
            continue;
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        // Every column masked: emit zeros, not a distribution.
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if mask.is_some_and(|m| !m[j]) {
            out[j] = 0.0;
        } else {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_mean_inv_std(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests;
