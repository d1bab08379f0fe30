//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is itself written in terms of [`Tensor`] operations, so
//! calling [`grad`] with `create_graph = true` yields gradients that are part of
//! the graph and can be differentiated again. The Grad-CAM consistency loss
//! depends on this: the CAM contains a gradient, and the loss over the CAM is
//! differentiated with respect to the parameters.
//!
//! Graphs are reference counted and single threaded.

mod functional;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use functional::{
    conv2d, global_avg_pool, group_norm, linear, log_softmax, max_pool2d, row_max, row_min,
    select_columns, softmax,
};

/// Dense row-major storage used for every tensor value.
pub type Array = ArrayD<f64>;

/// Index value that reads as zero in [`Tensor::gather`] and is skipped by
/// [`Tensor::scatter_add`].
pub const PAD_INDEX: u32 = u32::MAX;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether newly created tensors record the operation that produced them.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

pub(crate) trait Op {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product for each input. Entries whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        inputs: &[Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct GradFn {
    op: Box<dyn Op>,
    inputs: Vec<Tensor>,
}

struct Node {
    value: Array,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op.name()))
            .finish()
    }
}

impl Tensor {
    /// A leaf that never receives gradients.
    pub fn constant(value: Array) -> Self {
        Tensor(Rc::new(Node {
            value: value.as_standard_layout().into_owned(),
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn parameter(value: Array) -> Self {
        Tensor(Rc::new(Node {
            value: value.as_standard_layout().into_owned(),
            requires_grad: true,
            grad_fn: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    pub(crate) fn from_op(value: Array, op: impl Op + 'static, inputs: Vec<Tensor>) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        if track {
            Tensor(Rc::new(Node {
                value,
                requires_grad: true,
                grad_fn: Some(GradFn {
                    op: Box::new(op),
                    inputs,
                }),
            }))
        } else {
            Tensor(Rc::new(Node {
                value,
                requires_grad: false,
                grad_fn: None,
            }))
        }
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
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

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            value: self.0.value.clone(),
            requires_grad: false,
            grad_fn: None,
        }))
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("output does not require grad")]
    NoGraph,
    #[error("gradient shape {got:?} does not match value shape {expected:?} in op `{op}`")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Gradients of `output` (summed over its elements) with respect to each of
/// `wrt`. Inputs the output does not depend on get a zero gradient.
///
/// With `create_graph` the returned gradients are themselves differentiable.
pub fn grad(
    output: &Tensor,
    wrt: &[Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>, AutogradError> {
    if !output.requires_grad() {
        return Err(AutogradError::NoGraph);
    }

    let order = topo_order(output);
    let wrt_keys: HashSet<usize> = wrt.iter().map(Tensor::key).collect();

    // Nodes on some path from a `wrt` tensor up to the output.
    let mut needed: HashSet<usize> = HashSet::new();
    for node in &order {
        let hit = wrt_keys.contains(&node.key())
            || node
                .0
                .grad_fn
                .as_ref()
                .is_some_and(|g| g.inputs.iter().any(|i| needed.contains(&i.key())));
        if hit {
            needed.insert(node.key());
        }
    }

    let _mode = GradModeGuard::new(create_graph);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    if needed.contains(&output.key()) {
        grads.insert(
            output.key(),
            Tensor::constant(ArrayD::ones(IxDyn(output.shape()))),
        );
    }

    for node in order.iter().rev() {
        let key = node.key();
        if !needed.contains(&key) {
            continue;
        }
        let Some(gfn) = node.0.grad_fn.as_ref() else {
            continue;
        };
        let g = if wrt_keys.contains(&key) {
            match grads.get(&key) {
                Some(g) => g.clone(),
                None => continue,
            }
        } else {
            match grads.remove(&key) {
                Some(g) => g,
                None => continue,
            }
        };
        let needs: Vec<bool> = gfn
            .inputs
            .iter()
            .map(|i| i.requires_grad() && needed.contains(&i.key()))
            .collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let input_grads = gfn.op.backward(&gfn.inputs, node, &g, &needs);
        for ((input, ig), need) in gfn.inputs.iter().zip(input_grads).zip(&needs) {
            if !*need {
                continue;
            }
            let Some(ig) = ig else { continue };
            if ig.shape() != input.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: gfn.op.name(),
                    expected: input.shape().to_vec(),
                    got: ig.shape().to_vec(),
                });
            }
            let k = input.key();
            let acc = match grads.remove(&k) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(k, acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|t| {
            grads
                .get(&t.key())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Post-order over the tracked part of the graph (inputs before consumers).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.key()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(g) = t.0.grad_fn.as_ref() {
            for i in g.inputs.iter().rev() {
                if i.requires_grad() && !visited.contains(&i.key()) {
                    stack.push((i.clone(), false));
                }
            }
        }
    }
    order
}
