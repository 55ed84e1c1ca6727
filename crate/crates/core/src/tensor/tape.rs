use std::cell::{Cell, RefCell};
use std::fmt;

use super::{kernels, Scalar, Tensor};
use crate::error::TensorError;

/// Reverse rule of one recorded op.
///
/// `inputs` and `output` are the forward values; the returned vector holds one
/// optional gradient per input (in input order). `None` means "no gradient".
pub(crate) trait BackwardOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, TensorError>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    retain: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation so it can be differentiated once.
///
/// Node ids are assigned in creation order, which is a topological order of
/// the graph; backward walks ids in reverse. A tape is `Send` but not `Sync`:
/// it can move between workers but is only ever used by one at a time.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    fault: RefCell<Option<String>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: RefCell::new(None),
        }
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Vec::new(), None)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupts the reverse rule of every op named `op` (test fixture for the
    /// gradient checker).
    pub fn inject_backward_fault(&self, op: &str) {
        *self.fault.borrow_mut() = Some(op.to_string());
    }

    fn push(
        &self,
        value: Tensor<T>,
        requires_grad: bool,
        inputs: Vec<usize>,
        op: Option<Box<dyn BackwardOp<T>>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            retain: false,
            inputs,
            op,
            grad: None,
        });
        Var { tape: self, id }
    }

    /// Appends the result of an op. Rejects non-finite outputs.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[Var<'t, T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var<'t, T>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if requires_grad {
            Ok(self.push(
                value,
                true,
                inputs.iter().map(|v| v.id).collect(),
                Some(Box::new(op)),
            ))
        } else {
            Ok(self.push(value, false, Vec::new(), None))
        }
    }

    /// Accumulates d(loss)/d(node) into every leaf (and retained node)
    /// reachable from `loss`. A tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        if self.consumed.get() {
            return Err(TensorError::Usage(
                "graph already consumed; run a fresh forward pass".into(),
            ));
        }
        let loss_shape = loss.shape();
        if loss.value().numel() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {loss_shape:?}"
            )));
        }
        self.consumed.set(true);

        let fault = self.fault.borrow().clone();
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(Tensor::ones(&loss_shape));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let mut input_grads = op.backward(&inputs, &node.value, &g)?;
                if fault.as_deref() == Some(op.name()) {
                    for ig in input_grads.iter_mut().flatten() {
                        *ig = ig.map(|v| v * super::lit(1.5) + super::lit(1e-3));
                    }
                }
                for (&input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), nodes[input].value.shape(), "{}", op.name());
                    grads[input] = Some(match grads[input].take() {
                        Some(acc) => kernels::add_same(&acc, &ig),
                        None => ig,
                    });
                }
            }
            let node = &mut nodes[id];
            if node.op.is_none() || node.retain {
                node.grad = Some(match node.grad.take() {
                    Some(acc) => kernels::add_same(&acc, &g),
                    None => g,
                });
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Keeps this intermediate's gradient available after backward.
    pub fn retain_grad(self) -> Self {
        self.tape.nodes.borrow_mut()[self.id].retain = true;
        self
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<(), TensorError> {
        self.tape.backward(*self)
    }
}
