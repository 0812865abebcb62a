use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::sparse::SparseMatrix;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// The operation that produced a tensor. Parents live on the node.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Square,
    LeakyRelu(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    SumAll,
    SumAxis(usize, bool),
    BroadcastTo,
    SumTo,
    Spmm(SparseMatrix),
    Narrow { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    Concat { axis: usize },
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: ArrayD<f64>,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) requires_grad: bool,
}

/// An immutable n-dimensional `f64` array that records how it was computed.
///
/// Cloning is cheap (reference counted). A tensor created while grad mode is
/// enabled keeps its parents alive so gradients can flow back to leaves that
/// were created with [`Tensor::param`].
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    fn leaf(value: ArrayD<f64>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        }))
    }

    /// A constant: gradients never flow into it.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::leaf(value, false)
    }

    /// A differentiable leaf (trainable weight, or an input we want gradients for).
    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor::leaf(value, true)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape does not match data length");
        Tensor::constant(value)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::ones(IxDyn(shape)))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, op: Op, parents: Vec<Tensor>) -> Tensor {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::constant(value);
        }
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op,
            parents,
            requires_grad: true,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// Takes the value out without copying when this handle is the only owner.
    pub fn into_value(self) -> ArrayD<f64> {
        match Arc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(shared) => shared.value.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }
}
