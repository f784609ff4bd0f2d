//! Dense f64 arrays with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to tensors that are attached to
//! it. Tensors without a tape are plain constants: operations on them are
//! evaluated eagerly and nothing is recorded, which is how inference paths and
//! frozen reference models run.
//!
//! ```
//! use mapo_lab::ndgrad::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, -2.0]));
//! let loss = w.square().unwrap().sum().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(w.param_id().unwrap()).values(), &[2.0, -4.0]);
//! ```
//!
//! Only scalar broadcasting is supported: a one-element operand combines with
//! a tensor of any shape. Every other shape coercion (bias rows, reductions)
//! must be spelled out with `matmul`, `sum_axis`, `concat` or `slice`.

mod check;
mod ops;

pub use check::finite_difference_check;
pub use ops::{sigmoid, softplus, OpKind};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: argument outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward requires a tensor recorded on an active tape")]
    NoTape,
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("loss is not finite at probe of parameter {param}, element {index}")]
    NonFiniteProbe { param: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Position of a trainable tensor in the order it was registered on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.data)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Compares shape and values only; tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(GradError::ShapeMismatch {
                op: "new",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), values))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            data: Rc::new(values),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        Rc::try_unwrap(self.data).unwrap_or_else(|rc| (*rc).clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(GradError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A copy of the values with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        // Reshape is a view: the node keeps the flat layout, so gradients pass through unchanged.
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        })
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The parameter slot this tensor occupies, if it was registered with [`Tape::param`].
    pub fn param_id(&self) -> Option<ParamId> {
        let node = self.node.as_ref()?;
        let inner = node.tape.inner.borrow();
        inner.params.iter().position(|&id| id == node.id).map(ParamId)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Runs reverse-mode differentiation from this scalar and consumes its tape.
    pub fn backward(&self) -> Result<GradientMap> {
        let node = self.node.as_ref().ok_or(GradError::NoTape)?;
        if self.numel() != 1 {
            return Err(GradError::NotScalar(self.shape.clone()));
        }
        node.tape.backward_from(node.id)
    }
}

/// Append-only record of primitive applications.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: Vec<usize>,
    consumed: bool,
}

struct Node {
    numel: usize,
    op: ops::Recorded,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a trainable leaf and returns the tracked handle.
    ///
    /// Panics if the tape was already consumed.
    pub fn param(&self, value: Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "cannot register parameters on a consumed tape");
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            numel: value.numel(),
            op: ops::Recorded::Leaf,
        });
        inner.params.push(id);
        Tensor {
            shape: value.shape,
            data: value.data,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().params.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn record(&self, numel: usize, op: ops::Recorded) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(GradError::TapeConsumed);
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node { numel, op });
        Ok(id)
    }

    fn backward_from(&self, root: usize) -> Result<GradientMap> {
        let (nodes, params) = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(GradError::TapeConsumed);
            }
            inner.consumed = true;
            (
                std::mem::take(&mut inner.nodes),
                inner.params.clone(),
            )
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, ops::Recorded::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            nodes[id].op.backward(&g, &nodes, &mut grads);
        }
        let grads = params
            .iter()
            .map(|&id| grads[id].take().unwrap_or_else(|| vec![0.0; nodes[id].numel]))
            .collect();
        Ok(GradientMap { grads })
    }
}

/// Gradients of a scalar loss with respect to every registered parameter, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    grads: Vec<Vec<f64>>,
}

impl GradientMap {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> GradView<'_> {
        GradView(&self.grads[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_slice()))
    }

    pub fn into_vecs(self) -> Vec<Vec<f64>> {
        self.grads
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradView<'a>(&'a [f64]);

impl<'a> GradView<'a> {
    pub fn values(&self) -> &'a [f64] {
        self.0
    }
}
