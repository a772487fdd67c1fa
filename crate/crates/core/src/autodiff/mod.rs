//! Dense-tensor compute graph with reverse-mode differentiation.
//!
//! A [`Tape`] is a dynamic graph rebuilt for every training step: operations
//! execute eagerly and record enough structure for a single reverse sweep.
//! Nodes are indexed by [`TensorId`] in construction order, so every parent
//! precedes its children and the backward pass visits each node exactly once.
//!
//! Storage precision is generic: `Tape<f32>` for training, `Tape<f64>` for
//! gradient verification (finite differences are unreliable in 32-bit).

mod gradcheck;
mod kernels;

pub use gradcheck::{check_op_kind, grad_check, GradCheckOutcome};
pub(crate) use kernels::{conv_out_extent, matmul_nn, matmul_nt, matmul_tn, softmax_rows};

use crate::error::{Error, Result};

/// Epsilon inside layer normalization denominators.
pub const LAYERNORM_EPS: f64 = 1e-5;
/// Floor for L2-normalization denominators.
pub const L2NORM_EPS: f64 = 1e-12;

/// Element type of a tape. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Registered operation kinds, used by the verification battery and
/// error reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Conv2d,
    Relu,
    Add,
    AddBias,
    Scale,
    Offset,
    Mul,
    Concat,
    Slice,
    Reshape,
    Softmax,
    LogSumExp,
    LayerNorm,
    L2Normalize,
    Mean,
    Sum,
    Abs,
    Sqrt,
    InnerProduct,
    Transpose,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::LogSumExp => "logsumexp",
            OpKind::LayerNorm => "layernorm",
            OpKind::L2Normalize => "l2norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::InnerProduct => "inner_product",
            OpKind::Transpose => "transpose",
        }
    }

    /// Every differentiable kind, in report order.
    pub fn all() -> &'static [OpKind] {
        &[
            OpKind::Matmul,
            OpKind::Conv2d,
            OpKind::Relu,
            OpKind::Add,
            OpKind::AddBias,
            OpKind::Scale,
            OpKind::Offset,
            OpKind::Mul,
            OpKind::Concat,
            OpKind::Slice,
            OpKind::Reshape,
            OpKind::Softmax,
            OpKind::LogSumExp,
            OpKind::LayerNorm,
            OpKind::L2Normalize,
            OpKind::Mean,
            OpKind::Sum,
            OpKind::Abs,
            OpKind::Sqrt,
            OpKind::InnerProduct,
            OpKind::Transpose,
        ]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    Relu(TensorId),
    Add(TensorId, TensorId),
    AddBias {
        x: TensorId,
        b: TensorId,
    },
    Scale(TensorId, f64),
    Offset(TensorId, #[allow(dead_code)] f64),
    Mul(TensorId, TensorId),
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(TensorId),
    Softmax(TensorId),
    LogSumExp(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    L2Normalize(TensorId),
    Mean(TensorId),
    Sum(TensorId),
    Abs(TensorId),
    Sqrt(TensorId),
    InnerProduct(TensorId, TensorId),
    Transpose(TensorId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(..) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Mul(..) => OpKind::Mul,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Abs(..) => OpKind::Abs,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::InnerProduct(..) => OpKind::InnerProduct,
            Op::Transpose(..) => OpKind::Transpose,
        }
    }

    fn for_each_parent(&self, mut f: impl FnMut(TensorId)) {
        match self {
            Op::Leaf => {}
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::InnerProduct(a, b) => {
                f(*a);
                f(*b);
            }
            Op::AddBias { x, b } => {
                f(*x);
                f(*b);
            }
            Op::Conv2d { x, w, b, .. } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::LayerNorm { x, gamma, beta } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Concat { inputs, .. } => {
                for id in inputs {
                    f(*id);
                }
            }
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LogSumExp(x)
            | Op::L2Normalize(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Abs(x)
            | Op::Sqrt(x)
            | Op::Transpose(x) => f(*x),
        }
    }
}

struct Node<E> {
    shape: Vec<usize>,
    values: Vec<E>,
    /// Persistent gradient for `requires_grad` leaves; accumulated across
    /// backward passes until [`Tape::zero_grads`].
    grad: Option<Vec<E>>,
    requires_grad: bool,
    /// True when any gradient path from a `requires_grad` leaf reaches here.
    needs_grad: bool,
    op: Op,
}

/// Dynamic compute graph. See module docs.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    fault: Option<(OpKind, f64)>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn extent_product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every backward contribution of one op kind. Exists so the
    /// verification harness can prove it detects broken backward rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn value(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<E>, op: Op) -> TensorId {
        debug_assert_eq!(extent_product(&shape), values.len());
        let mut needs = false;
        op.for_each_parent(|p| needs |= self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad: false,
            needs_grad: needs,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    fn check2d(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(Self::shape_err(op, format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    /// Rows/cols view used by the row-wise ops: rank-1 tensors act as a
    /// single row.
    fn rows_cols(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Self::shape_err(op, format!("expected rank-1 or rank-2 tensor, got {s:?}"))),
        }
    }

    // ── Graph inputs ─────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], values: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if extent_product(shape) != values.len() {
            return Err(Self::shape_err(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", extent_product(shape), values.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Self::shape_err("leaf", format!("zero extent in shape {shape:?}")));
        }
        let id = self.push(shape.to_vec(), values, Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        self.nodes[id.0].needs_grad = requires_grad;
        Ok(id)
    }

    /// A leaf that never receives gradients (targets, masks, constants).
    pub fn constant(&mut self, shape: &[usize], values: Vec<E>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: E) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    // ── Operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check2d("matmul", a)?;
        let (kb, n) = self.check2d("matmul", b)?;
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("inner extents differ: {m}x{ka} vs {kb}x{n}"),
            ));
        }
        let mut out = vec![E::zero(); m * n];
        matmul_nn(self.value(a), self.value(b), m, ka, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b)))
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (ci, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Self::shape_err("conv2d", format!("input must be CxHxW, got {s:?}"))),
        };
        let (co, wci, kh, kw) = match self.shape(w) {
            [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
            s => return Err(Self::shape_err("conv2d", format!("weight must be rank-4, got {s:?}"))),
        };
        if wci != ci {
            return Err(Self::shape_err(
                "conv2d",
                format!("input has {ci} channels but weight expects {wci}"),
            ));
        }
        if self.shape(b) != [co] {
            return Err(Self::shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {co} output channels", self.shape(b)),
            ));
        }
        let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            Self::shape_err("conv2d", format!("kernel {kh} exceeds padded height of input {h} (pad {pad})"))
        })?;
        let ow = conv_out_extent(wd, kw, stride, pad).ok_or_else(|| {
            Self::shape_err("conv2d", format!("kernel {kw} exceeds padded width of input {wd} (pad {pad})"))
        })?;
        let mut out = vec![E::zero(); co * oh * ow];
        kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            &mut out,
        );
        Ok(self.push(vec![co, oh, ow], out, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    /// Adds a length-`cols` bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.check2d("add_bias", x)?;
        if self.shape(b) != [cols] {
            return Err(Self::shape_err(
                "add_bias",
                format!("bias {:?} does not match {rows}x{cols} input", self.shape(b)),
            ));
        }
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(xv[r * cols + c] + bv[c]);
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::AddBias { x, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let k = E::from_f64(c);
        let out: Vec<E> = self.value(x).iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: TensorId, c: f64) -> TensorId {
        let k = E::from_f64(c);
        let out: Vec<E> = self.value(x).iter().map(|&v| v + k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Offset(x, c))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let rank = self.shape(inputs[0]).len();
        if rank == 1 {
            if axis != 0 {
                return Err(Self::shape_err("concat", format!("axis {axis} invalid for rank-1")));
            }
            let mut out = Vec::new();
            for &id in inputs {
                if self.shape(id).len() != 1 {
                    return Err(Self::shape_err("concat", "mixed ranks".into()));
                }
                out.extend_from_slice(self.value(id));
            }
            let len = out.len();
            return Ok(self.push(vec![len], out, Op::Concat { inputs: inputs.to_vec(), axis }));
        }
        if rank != 2 || axis > 1 {
            return Err(Self::shape_err(
                "concat",
                format!("supports rank-1/rank-2 with axis 0 or 1, got rank {rank} axis {axis}"),
            ));
        }
        let (r0, c0) = self.check2d("concat", inputs[0])?;
        if axis == 0 {
            let mut rows = 0;
            let mut out = Vec::new();
            for &id in inputs {
                let (r, c) = self.check2d("concat", id)?;
                if c != c0 {
                    return Err(Self::shape_err("concat", format!("column mismatch: {c0} vs {c}")));
                }
                rows += r;
                out.extend_from_slice(self.value(id));
            }
            Ok(self.push(vec![rows, c0], out, Op::Concat { inputs: inputs.to_vec(), axis }))
        } else {
            let mut cols = 0;
            for &id in inputs {
                let (r, c) = self.check2d("concat", id)?;
                if r != r0 {
                    return Err(Self::shape_err("concat", format!("row mismatch: {r0} vs {r}")));
                }
                cols += c;
            }
            let mut out = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &id in inputs {
                    let c = self.shape(id)[1];
                    out.extend_from_slice(&self.value(id)[r * c..(r + 1) * c]);
                }
            }
            Ok(self.push(vec![r0, cols], out, Op::Concat { inputs: inputs.to_vec(), axis }))
        }
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        match (shape.as_slice(), axis) {
            ([n], 0) => {
                if start + len > *n {
                    return Err(Self::shape_err("slice", format!("{start}..{} out of {n}", start + len)));
                }
                let out = self.value(x)[start..start + len].to_vec();
                Ok(self.push(vec![len], out, Op::Slice { x, axis, start, len }))
            }
            ([r, c], 0) => {
                if start + len > *r {
                    return Err(Self::shape_err("slice", format!("rows {start}..{} out of {r}", start + len)));
                }
                let out = self.value(x)[start * c..(start + len) * c].to_vec();
                Ok(self.push(vec![len, *c], out, Op::Slice { x, axis, start, len }))
            }
            ([r, c], 1) => {
                if start + len > *c {
                    return Err(Self::shape_err("slice", format!("cols {start}..{} out of {c}", start + len)));
                }
                let xv = self.value(x);
                let mut out = Vec::with_capacity(r * len);
                for row in 0..*r {
                    out.extend_from_slice(&xv[row * c + start..row * c + start + len]);
                }
                Ok(self.push(vec![*r, len], out, Op::Slice { x, axis, start, len }))
            }
            _ => Err(Self::shape_err(
                "slice",
                format!("unsupported shape {shape:?} with axis {axis}"),
            )),
        }
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if extent_product(shape) != self.value(x).len() {
            return Err(Self::shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    /// `CxHxW -> Cx(H*W)` in row-major spatial order.
    pub fn flatten_spatial(&mut self, x: TensorId) -> Result<TensorId> {
        match self.shape(x) {
            [c, h, w] => {
                let (c, hw) = (*c, h * w);
                self.reshape(x, &[c, hw])
            }
            s => Err(Self::shape_err("reshape", format!("flatten_spatial needs CxHxW, got {s:?}"))),
        }
    }

    pub fn flatten_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Row-wise softmax (max-subtracted). Rank-1 inputs act as one row.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("softmax", x)?;
        let mut out = vec![E::zero(); rows * cols];
        softmax_rows(self.value(x), rows, cols, &mut out);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax(x)))
    }

    /// Row-wise log-sum-exp: `[r, c] -> [r]` (rank-1 input gives `[1]`).
    pub fn logsumexp(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("logsumexp", x)?;
        let mut out = vec![E::zero(); rows];
        kernels::logsumexp_rows(self.value(x), rows, cols, &mut out);
        Ok(self.push(vec![rows], out, Op::LogSumExp(x)))
    }

    /// Row-wise layer normalization with learnable affine parameters.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("layernorm", x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Self::shape_err(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} do not match row width {cols}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = E::from_f64(LAYERNORM_EPS);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let inv_n = E::one() / E::from_f64(cols as f64);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_sigma = E::one() / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                out.push(gv[c] * ((v - mean) * inv_sigma) + bv[c]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta }))
    }

    /// Row-wise L2 normalization (rank-1 input is one row).
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("l2norm", x)?;
        let eps = E::from_f64(L2NORM_EPS);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut sq = E::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            let denom = if norm > eps { norm } else { eps };
            for &v in row {
                out.push(v / denom);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::L2Normalize(x)))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let mut acc = E::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        let out = vec![acc / E::from_f64(n as f64)];
        self.push(vec![1], out, Op::Mean(x))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = E::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        self.push(vec![1], vec![acc], Op::Sum(x))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.value(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.value(x).iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sqrt(x))
    }

    /// Flattened dot product of two equal-length tensors; returns `[1]`.
    pub fn inner_product(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Self::shape_err(
                "inner_product",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut acc = E::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b).iter()) {
            acc = acc + x * y;
        }
        Ok(self.push(vec![1], vec![acc], Op::InnerProduct(a, b)))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// `requires_grad` leaf that the loss depends on; repeated calls without
    /// [`Tape::zero_grads`] accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<E>>> = vec![None; n];
        scratch[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let grad = self.nodes[i]
                        .grad
                        .get_or_insert_with(|| vec![E::zero(); gout.len()]);
                    for (g, &v) in grad.iter_mut().zip(gout.iter()) {
                        *g = *g + v;
                    }
                }
                continue;
            }
            let contributions = self.op_backward(i, &gout);
            let fault = self.fault;
            for (pid, mut contrib) in contributions {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                if let Some((kind, factor)) = fault {
                    if self.nodes[i].op.kind() == kind {
                        let f = E::from_f64(factor);
                        for v in contrib.iter_mut() {
                            *v = *v * f;
                        }
                    }
                }
                match &mut scratch[pid.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(contrib.iter()) {
                            *a = *a + *v;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn op_backward(&self, i: usize, g: &[E]) -> Vec<(TensorId, Vec<E>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut ga = vec![E::zero(); m * k];
                let mut gb = vec![E::zero(); k * n];
                // dA = g . B^T, dB = A^T . g
                matmul_nt(g, self.value(*b), m, n, k, &mut ga);
                matmul_tn(self.value(*a), g, m, k, n, &mut gb);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (ci, h, wd) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (co, kh, kw) = {
                    let s = self.shape(*w);
                    (s[0], s[2], s[3])
                };
                let mut gx = vec![E::zero(); self.value(*x).len()];
                let mut gw = vec![E::zero(); self.value(*w).len()];
                let mut gb = vec![E::zero(); co];
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    g,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Relu(x) => {
                let gx: Vec<E> = self
                    .value(*x)
                    .iter()
                    .zip(g.iter())
                    .map(|(&v, &gv)| if v > E::zero() { gv } else { E::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias { x, b } => {
                let cols = self.shape(*b)[0];
                let rows = g.len() / cols;
                let mut gb = vec![E::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] = gb[c] + g[r * cols + c];
                    }
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Scale(x, c) => {
                let k = E::from_f64(*c);
                vec![(*x, g.iter().map(|&v| v * k).collect())]
            }
            Op::Offset(x, _) => vec![(*x, g.to_vec())],
            Op::Mul(a, b) => {
                let ga: Vec<E> = g.iter().zip(self.value(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<E> = g.iter().zip(self.value(*a)).map(|(&gv, &av)| gv * av).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat { inputs, axis } => {
                let mut out = Vec::with_capacity(inputs.len());
                if self.shape(TensorId(i)).len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &id in inputs {
                        let len = self.value(id).len();
                        out.push((id, g[offset..offset + len].to_vec()));
                        offset += len;
                    }
                } else {
                    let rows = self.shape(TensorId(i))[0];
                    let total_cols = self.shape(TensorId(i))[1];
                    let mut col0 = 0;
                    for &id in inputs {
                        let c = self.shape(id)[1];
                        let mut gi = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gi.extend_from_slice(&g[r * total_cols + col0..r * total_cols + col0 + c]);
                        }
                        out.push((id, gi));
                        col0 += c;
                    }
                }
                out
            }
            Op::Slice { x, axis, start, len } => {
                let mut gx = vec![E::zero(); self.value(*x).len()];
                match (self.shape(*x), axis) {
                    ([_], 0) => {
                        gx[*start..start + len].copy_from_slice(g);
                    }
                    ([_, c], 0) => {
                        gx[start * c..(start + len) * c].copy_from_slice(g);
                    }
                    ([r, c], 1) => {
                        for row in 0..*r {
                            for j in 0..*len {
                                gx[row * c + start + j] = g[row * len + j];
                            }
                        }
                    }
                    _ => unreachable!("slice shapes validated at construction"),
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Softmax(x) => {
                let (rows, cols) = match self.shape(*x) {
                    [n] => (1, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let s = &node.values;
                let mut gx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut dot = E::zero();
                    for (&sv, &gv) in srow.iter().zip(grow.iter()) {
                        dot = dot + sv * gv;
                    }
                    for c in 0..cols {
                        gx[r * cols + c] = srow[c] * (grow[c] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSumExp(x) => {
                let (rows, cols) = match self.shape(*x) {
                    [n] => (1, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let xv = self.value(*x);
                let lse = &node.values;
                let mut gx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = (xv[r * cols + c] - lse[r]).exp() * g[r];
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = match self.shape(*x) {
                    [n] => (1, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let eps = E::from_f64(LAYERNORM_EPS);
                let inv_n = E::one() / E::from_f64(cols as f64);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut gx = vec![E::zero(); rows * cols];
                let mut gg = vec![E::zero(); cols];
                let mut gb = vec![E::zero(); cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut mean = E::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_n;
                    let mut var = E::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_sigma = E::one() / (var + eps).sqrt();
                    // ghat = gamma*g; gx = (ghat - mean(ghat) - xhat*mean(ghat*xhat)) / sigma
                    let mut mean_ghat = E::zero();
                    let mut mean_ghat_xhat = E::zero();
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_sigma;
                        let ghat = gv[c] * grow[c];
                        mean_ghat = mean_ghat + ghat;
                        mean_ghat_xhat = mean_ghat_xhat + ghat * xhat;
                        gg[c] = gg[c] + grow[c] * xhat;
                        gb[c] = gb[c] + grow[c];
                    }
                    mean_ghat = mean_ghat * inv_n;
                    mean_ghat_xhat = mean_ghat_xhat * inv_n;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_sigma;
                        let ghat = gv[c] * grow[c];
                        gx[r * cols + c] = (ghat - mean_ghat - xhat * mean_ghat_xhat) * inv_sigma;
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::L2Normalize(x) => {
                let (rows, cols) = match self.shape(*x) {
                    [n] => (1, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let eps = E::from_f64(L2NORM_EPS);
                let xv = self.value(*x);
                let yv = &node.values;
                let mut gx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let yrow = &yv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut sq = E::zero();
                    for &v in row {
                        sq = sq + v * v;
                    }
                    let norm = sq.sqrt();
                    if norm > eps {
                        let mut dot = E::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow.iter()) {
                            dot = dot + yv * gv;
                        }
                        for c in 0..cols {
                            gx[r * cols + c] = (grow[c] - yrow[c] * dot) / norm;
                        }
                    } else {
                        for c in 0..cols {
                            gx[r * cols + c] = grow[c] / eps;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / E::from_f64(n as f64);
                vec![(*x, vec![v; n])]
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0]; n])]
            }
            Op::Abs(x) => {
                let gx: Vec<E> = self
                    .value(*x)
                    .iter()
                    .zip(g.iter())
                    .map(|(&v, &gv)| {
                        if v > E::zero() {
                            gv
                        } else if v < E::zero() {
                            -gv
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sqrt(x) => {
                let half = E::from_f64(0.5);
                let gx: Vec<E> = node
                    .values
                    .iter()
                    .zip(g.iter())
                    .map(|(&y, &gv)| gv * half / y)
                    .collect();
                vec![(*x, gx)]
            }
            Op::InnerProduct(a, b) => {
                let g0 = g[0];
                let ga: Vec<E> = self.value(*b).iter().map(|&v| v * g0).collect();
                let gb: Vec<E> = self.value(*a).iter().map(|&v| v * g0).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                // g has shape c x r
                let mut gx = vec![E::zero(); r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        gx[j * c + i2] = g[i2 * r + j];
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch_names_extents() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_constant_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[3], vec![0.7, 0.7, 0.7]).unwrap();
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s) {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let v = rand_vec(&mut rng, 9);
            let c = rng.gen_range(-5.0..5.0);
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(&[9], v.clone()).unwrap();
            let b = tape
                .constant(&[9], v.iter().map(|x| x + c).collect())
                .unwrap();
            let sa = tape.softmax(a).unwrap();
            let sb = tape.softmax(b).unwrap();
            for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
                assert_relative_eq!(x, y, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[4], vec![0.3, -1.0, 2.0, 0.0], true).unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_self_inner_product_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![0.5, -2.0, 3.0];
        let x = tape.leaf(&[3], vals.clone(), true).unwrap();
        let loss = tape.inner_product(x, x).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, vi) in g.iter().zip(vals.iter()) {
            assert_relative_eq!(*gi, 2.0 * vi, max_relative = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[2], vec![1.0, 1.0], true).unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    // a*f + b*g backward equals a*grad(f) + b*grad(g) on random graphs.
    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let xv = rand_vec(&mut rng, 6);
            let a = rng.gen_range(-2.0..2.0);
            let b = rng.gen_range(-2.0..2.0);

            let grads = |coef_f: f64, coef_g: f64, with_combined: bool| -> Vec<f64> {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(&[2, 3], xv.clone(), true).unwrap();
                let sm = tape.softmax(x).unwrap();
                let f = tape.sum(sm);
                let xx = tape.mul(x, x).unwrap();
                let g = tape.mean(xx);
                let loss = if with_combined {
                    let fa = tape.scale(f, coef_f);
                    let gb = tape.scale(g, coef_g);
                    tape.add(fa, gb).unwrap()
                } else if coef_f != 0.0 {
                    tape.scale(f, coef_f)
                } else {
                    tape.scale(g, coef_g)
                };
                tape.backward(loss).unwrap();
                tape.grad(x).unwrap().to_vec()
            };

            let gf = grads(1.0, 0.0, false);
            let gg = grads(0.0, 1.0, false);
            let combined = grads(a, b, true);
            for i in 0..6 {
                assert_relative_eq!(combined[i], a * gf[i] + b * gg[i], max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_grads_are_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let xv: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(&[3, 4], xv, true).unwrap();
            let s = tape.softmax(x).unwrap();
            let ln_g = tape.constant(&[4], vec![1.0; 4]).unwrap();
            let ln_b = tape.constant(&[4], vec![0.0; 4]).unwrap();
            let l = tape.layernorm(s, ln_g, ln_b).unwrap();
            let loss = tape.mean(l);
            tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), tape.grad(x).unwrap().to_vec())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn concat_slice_round_trip_is_exact() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let top = tape.slice(a, 0, 0, 1).unwrap();
        let bottom = tape.slice(a, 0, 1, 1).unwrap();
        let back = tape.concat(&[top, bottom], 0).unwrap();
        assert_eq!(tape.value(back), tape.value(a));

        let left = tape.slice(a, 1, 0, 2).unwrap();
        let right = tape.slice(a, 1, 2, 1).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(a));
    }

    #[test]
    fn gradients_do_not_flow_into_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let c = tape.constant(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0, 5.0]);
    }
}
