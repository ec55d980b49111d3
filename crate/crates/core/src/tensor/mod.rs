//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors form an implicit acyclic graph through parent links; calling
//! [`Tensor::backward`] on a scalar root walks the graph once in reverse
//! topological order and accumulates gradients into every node that needs
//! them. Constants (no gradient-requiring ancestor) record no graph at all,
//! so large feature maps stay cheap.
//!
//! Forward-shape mismatches are programming errors and panic naming both
//! shapes; backward misuse (non-scalar root, repeated backward) returns
//! [`Error::Autodiff`].
//!
//! A tensor graph is a single-threaded unit of work; distinct graphs may live
//! on distinct threads.

mod ops;

pub mod checkpoint;
pub mod mlp;
pub mod optim;

pub use mlp::{mlp_forward, Activation, Linear, MlpParams};
pub use ops::focal_loss;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Closure computing parent gradient contributions from the node's gradient.
type BackwardStep = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_step: Option<BackwardStep>,
    /// Set once backward has consumed this node; guards double backward.
    done: Cell<bool>,
}

/// A shared handle to one node of the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value.borrow())
            .finish()
    }
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_step: Option<BackwardStep>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            value.len(),
            "tensor data length {} does not match shape {:?}",
            value.len(),
            shape
        );
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "tensor shape {shape:?} must have all dims >= 1"
        );
        let needs_grad = requires_grad || parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            needs_grad,
            parents: if needs_grad { parents } else { Vec::new() },
            backward_step: if needs_grad { backward_step } else { None },
            done: Cell::new(false),
        }))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], value: Vec<f64>) -> Tensor {
        Tensor::from_parts(shape.to_vec(), value, true, Vec::new(), None)
    }

    /// Non-trainable leaf; records no graph.
    pub fn constant(shape: &[usize], value: Vec<f64>) -> Tensor {
        Tensor::from_parts(shape.to_vec(), value, false, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    /// Result of an op: gradient bookkeeping is dropped when no input needs it.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: Vec<Tensor>,
        backward_step: BackwardStep,
    ) -> Tensor {
        Tensor::from_parts(shape, value, false, parents, Some(backward_step))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.value.borrow()[0]
    }

    /// Overwrites the stored value in place (optimizer steps, finite
    /// differences). Shape is fixed.
    pub fn set_value(&self, value: &[f64]) {
        let mut v = self.0.value.borrow_mut();
        assert_eq!(
            v.len(),
            value.len(),
            "set_value length {} does not match shape {:?}",
            value.len(),
            self.shape()
        );
        v.copy_from_slice(value);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.0.needs_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// `requires_grad` leaf reachable from the root; leaves keep their
    /// gradients until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.done.get() {
            return Err(Error::Autodiff(
                "backward already ran on this graph; rebuild it before differentiating again"
                    .into(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        if !self.0.needs_grad {
            // Constant root: nothing requires a gradient.
            self.0.done.set(true);
            return Ok(());
        }
        for node in order.iter().rev() {
            node.0.done.set(true);
            let Some(step) = &node.0.backward_step else {
                continue;
            };
            let grad = node.0.grad.borrow();
            if let Some(g) = grad.as_ref() {
                step(g);
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over parent links.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.0.id);
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if seen.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Central finite-difference check of `d loss / d param` for every element of
/// every listed parameter.
///
/// `build` must reconstruct the loss from the current parameter values on
/// each call. Returns the largest relative error, where the error of a pair
/// (analytic a, numeric n) is |a - n| / max(1e-3, |a|, |n|).
pub fn gradcheck<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Tensor,
{
    for p in params {
        p.zero_grad();
    }
    let loss = build();
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + eps;
            p.set_value(&bumped);
            let up = build().item();
            bumped[i] = base[i] - eps;
            p.set_value(&bumped);
            let down = build().item();
            p.set_value(&base);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(max_rel)
}
