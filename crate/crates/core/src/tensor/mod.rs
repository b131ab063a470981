//! Dense 2-D tensors with reverse-mode differentiation.
//!
//! Values are immutable and cheaply cloneable (`Arc` inside). An operation
//! records itself on the produced tensor whenever at least one input is
//! connected to a graph (a leaf or the result of a recorded op); computing on
//! plain constants never builds a graph, so the same code path serves both
//! recorded and unrecorded execution. Graphs are rebuilt per forward pass and
//! dropped with the loss value.
//!
//! Second-order products (Hessian-vector, mixed-partial-vector) come from
//! differentiating the backward pass itself: every VJP below is expressed in
//! the same recorded ops, so [`autograd::grads`] with `create_graph` produces
//! gradients that can be differentiated again.

mod autograd;
mod ops;
mod param;

pub use autograd::{backward, grads, hvp, mixed_vjp};
pub use ops::{bce, concat_cols, dot, BCE_EPS};
pub use param::ParamSet;

use std::sync::Arc;

/// Errors raised by tensor construction, operations, and differentiation.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss is not connected to a recorded graph")]
    NotRecorded,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{op}: input outside valid domain")]
    Domain { op: &'static str },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// How a tensor was produced, kept only while a graph is alive.
#[derive(Debug)]
pub(crate) enum Node {
    Leaf,
    Op(Op),
}

/// Recorded operations. Each variant stores the parents (and any constants)
/// its VJP needs.
#[derive(Debug)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Ln(Tensor),
    Clamp { x: Tensor, lo: f64, hi: f64 },
    Neg(Tensor),
    Scale(Tensor, f64),
    SumAll(Tensor),
    MeanAll(Tensor),
    SumRows(Tensor),
    BroadcastRows(Tensor),
    BroadcastScalar(Tensor),
    ConcatCols(Vec<Tensor>),
    SliceCols { x: Tensor, start: usize, len: usize },
    GatherRows { x: Tensor, idx: Arc<Vec<usize>> },
    ScatterRows { x: Tensor, idx: Arc<Vec<usize>> },
}

#[derive(Debug)]
pub(crate) struct Inner {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    node: Option<Node>,
}

/// An immutable 2-D array of 64-bit reals. Scalars are `[1, 1]`.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) inner: Arc<Inner>,
}

impl Tensor {
    /// Builds a constant tensor, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if rows * cols != data.len() {
            return Err(TensorError::InvalidShape {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self::from_parts(rows, cols, data, None))
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(1, 1, vec![v])
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Self::from_parts(rows, cols, vec![0.0; rows * cols], None)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
        Self::from_parts(rows, cols, vec![v; rows * cols], None)
    }

    /// Column vector from a slice.
    pub fn column(data: &[f64]) -> Result<Tensor> {
        Tensor::new(data.len(), 1, data.to_vec())
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Arc::new(Inner { rows, cols, data, node }),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.inner.rows, self.inner.cols]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Whether this value participates in a recorded graph.
    pub fn is_connected(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Same values, cut loose from any graph.
    pub fn detach(&self) -> Tensor {
        if self.inner.node.is_none() {
            return self.clone();
        }
        Self::from_parts(self.rows(), self.cols(), self.inner.data.clone(), None)
    }

    /// A fresh differentiation root with this tensor's values. Gradients are
    /// reported against the returned tensor, not `self`.
    pub fn as_leaf(&self) -> Tensor {
        Self::from_parts(self.rows(), self.cols(), self.inner.data.clone(), Some(Node::Leaf))
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }
}
