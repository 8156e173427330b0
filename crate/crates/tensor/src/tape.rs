//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op appends one node to the [`Tape`] holding the ids
//! of its inputs and a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] replays the closures in reverse recording
//! order. The tape is append-only during the forward pass and must be
//! cleared with [`Tape::clear`] before it is reused for the next step.
//!
//! A tape created with [`Tape::no_grad`] records nothing: values flow through
//! the same API but intermediate results are freed as soon as their last
//! [`Var`] is dropped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Operation kinds as seen by the op log (used for FLOP accounting).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Silu,
    MatMul,
    Reduce(ReduceKind),
    Permute,
    Reshape,
    Concat,
    Narrow,
    Conv2d {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm2d {
        training: bool,
    },
    Pool2d {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Unfold2d {
        kernel: usize,
        stride: usize,
    },
    UpsampleNearest2x,
    BilinearSample,
    DeformConv2d {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    Custom(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpEvent {
    pub kind: OpKind,
    pub inputs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    events: Option<Vec<OpEvent>>,
}

/// Shared handle to a recording tape. Cloning is cheap and aliases.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value on a tape. `node` is `None` for constants and for every value
/// produced while gradients are disabled.
pub struct Var<T> {
    tape: Tape<T>,
    node: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            node: self.node,
            value: Rc::clone(&self.value),
        }
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled,
                events: None,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Vars created before the call must not be
    /// used with this tape afterwards.
    pub fn clear(&self) {
        self.inner.borrow_mut().nodes.clear();
    }

    /// Starts logging an [`OpEvent`] for every op executed on this tape.
    pub fn start_op_log(&self) {
        self.inner.borrow_mut().events = Some(Vec::new());
    }

    pub fn take_op_log(&self) -> Vec<OpEvent> {
        self.inner.borrow_mut().events.take().unwrap_or_default()
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let node = if inner.grad_enabled {
            inner.nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self.clone(),
            node,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            tape: self.clone(),
            node: None,
            value: Rc::new(value),
        }
    }

    /// Records an op producing `value` from `inputs`. `backward` receives the
    /// output gradient and returns one optional gradient per input, in order.
    /// It is only stored when some input requires a gradient.
    pub fn record(
        &self,
        kind: OpKind,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        debug_assert!(
            !inputs.iter().all(|v| v.value.is_finite()) || value.is_finite(),
            "{kind:?} produced a non-finite value from finite inputs"
        );
        let mut inner = self.inner.borrow_mut();
        if let Some(events) = inner.events.as_mut() {
            events.push(OpEvent {
                kind,
                inputs: inputs.iter().map(|v| v.value.shape().to_vec()).collect(),
                output: value.shape().to_vec(),
            });
        }
        let tracked = inner.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            inner.nodes.push(Node {
                parents: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self.clone(),
            node,
            value: Rc::new(value),
        }
    }

    /// Reverse pass from a single-element `loss`. Gradients of intermediate
    /// nodes are released as soon as they have been propagated; leaf
    /// gradients are returned.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let Some(root) = loss.node else {
            return Err(TensorError::Autodiff(
                "loss does not depend on any differentiable leaf".into(),
            ));
        };
        if loss.value.numel() != 1 {
            return Err(TensorError::Autodiff(format!(
                "backward needs a single-element loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let n = self.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), T::one()));
        for id in (0..=root).rev() {
            let (parents, backward) = {
                let mut inner = self.inner.borrow_mut();
                let node = &mut inner.nodes[id];
                if node.parents.is_empty() {
                    continue;
                }
                (node.parents.clone(), node.backward.take())
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let Some(backward) = backward else {
                return Err(TensorError::Autodiff(format!(
                    "node {id} was already consumed by a previous backward pass"
                )));
            };
            let input_grads = backward(&grad);
            debug_assert_eq!(input_grads.len(), parents.len());
            for (parent, g) in parents.into_iter().zip(input_grads) {
                let (Some(p), Some(g)) = (parent, g) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the
    /// loss.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        Var {
            tape: self.tape.clone(),
            node: None,
            value: Rc::clone(&self.value),
        }
    }
}
