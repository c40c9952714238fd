//! Reverse-mode automatic differentiation on dynamically shaped `ndarray`
//! arrays.
//!
//! The engine is deliberately small: a [`Tensor`] wraps an `ArrayD` plus an
//! optional backward closure; operators build a DAG and [`Tensor::backward`]
//! walks it once in reverse topological order. Everything is single-threaded
//! and allocation order is fixed, so runs with the same seed are bitwise
//! reproducible.
//!
//! Scalars are generic over [`Element`] (`f32` for normal runs, `f64` for
//! high-precision gradient checking).

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

pub mod init;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod sinkhorn;

/// Scalar types the engine works over.
pub trait Element:
    Float
    + NumAssignOps
    + ScalarOperand
    + ndarray::LinalgScalar
    + FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Returns whether graph recording is currently enabled on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Backward closure: given the gradient flowing into a node and its parents,
/// produce one gradient array per parent (or `None` for parents that do not
/// need one).
type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[Tensor<T>]) -> Vec<Option<ArrayD<T>>>>;

pub struct Node<T: Element> {
    id: u64,
    data: RefCell<ArrayD<T>>,
    grad: RefCell<Option<ArrayD<T>>>,
    requires_grad: bool,
    parents: RefCell<Vec<Tensor<T>>>,
    backward: RefCell<Option<BackwardFn<T>>>,
}

impl<T: Element> Drop for Node<T> {
    fn drop(&mut self) {
        // Iterative teardown; a dropped graph must not recurse through long
        // parent chains.
        let mut work: Vec<Rc<Node<T>>> =
            self.parents.get_mut().drain(..).map(|t| t.0).collect();
        while let Some(rc) = work.pop() {
            if let Some(node) = Rc::into_inner(rc) {
                let mut node = node;
                work.extend(node.parents.get_mut().drain(..).map(|t| t.0));
            }
        }
    }
}

/// A reference-counted handle to a node in the computation graph.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn new(data: ArrayD<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: RefCell::new(Vec::new()),
            backward: RefCell::new(None),
        }))
    }

    /// Trainable leaf.
    pub fn param(data: ArrayD<T>) -> Self {
        Tensor::new(data, true)
    }

    /// Non-trainable leaf.
    pub fn constant(data: ArrayD<T>) -> Self {
        Tensor::new(data, false)
    }

    pub fn scalar(x: T) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    /// Builds an op node. Falls back to a constant leaf when recording is off
    /// or no parent participates in the graph.
    pub(crate) fn from_op(
        data: ArrayD<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        if !grad_enabled() || !parents.iter().any(|p| p.0.requires_grad) {
            return Tensor::constant(data);
        }
        let t = Tensor(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: RefCell::new(parents),
            backward: RefCell::new(Some(backward)),
        }));
        t
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Two handles to the same storage?
    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow of the underlying array.
    pub fn data(&self) -> std::cell::Ref<'_, ArrayD<T>> {
        self.0.data.borrow()
    }

    /// Clone of the underlying array.
    pub fn to_array(&self) -> ArrayD<T> {
        self.0.data.borrow().clone()
    }

    /// Mutable borrow of the underlying array (optimizer updates).
    pub fn data_mut(&self) -> std::cell::RefMut<'_, ArrayD<T>> {
        self.0.data.borrow_mut()
    }

    /// First element, for scalar-valued tensors.
    pub fn value(&self) -> T {
        *self
            .0
            .data
            .borrow()
            .iter()
            .next()
            .expect("value() on empty tensor")
    }

    /// Take the accumulated gradient, leaving `None`.
    pub fn take_grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replace the stored gradient (used by gradient clipping).
    pub fn set_grad(&self, g: ArrayD<T>) {
        *self.0.grad.borrow_mut() = Some(g);
    }

    fn accumulate_grad(&self, g: ArrayD<T>) {
        debug_assert_eq!(
            g.shape(),
            self.0.data.borrow().shape(),
            "gradient shape mismatch"
        );
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Cut the graph: same data, new non-recording leaf.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.to_array())
    }

    /// Reverse-mode sweep from this (scalar) tensor. Frees the traversed
    /// graph; leaf gradients stay available via [`Tensor::take_grad`].
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        let order = self.topo_order();
        self.accumulate_grad(ArrayD::from_elem(
            IxDyn(&self.shape()),
            T::one(),
        ));
        for node in order.iter().rev() {
            let backward = node.0.backward.borrow_mut().take();
            let Some(backward) = backward else { continue };
            let grad = node.0.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let parents = std::mem::take(&mut *node.0.parents.borrow_mut());
            let parent_grads = backward(&grad, &parents);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (p, pg) in parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.0.requires_grad {
                        p.accumulate_grad(pg);
                    }
                }
            }
        }
    }

    /// Post-order DFS over grad-requiring ancestry (valid topological order).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, child_index) explicit stack to avoid recursion
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((t, idx)) = stack.pop() {
            let parent = {
                let parents = t.0.parents.borrow();
                parents.get(idx).cloned()
            };
            match parent {
                Some(p) => {
                    stack.push((t, idx + 1));
                    if p.0.requires_grad && !visited.contains(&p.0.id) {
                        visited.insert(p.0.id);
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }
        order
    }
}

/// Convenience: lift an f64 literal into `T`.
pub fn lit<T: Element>(x: f64) -> T {
    <T as Element>::from_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_through_chain() {
        let x = Tensor::param(arr1(&[2.0f64, 3.0]).into_dyn());
        let y = x.mul(&x).sum_all(); // sum(x^2)
        y.backward();
        let g = x.take_grad().unwrap();
        assert_eq!(g[[0]], 4.0);
        assert_eq!(g[[1]], 6.0);
    }

    #[test]
    fn no_grad_builds_leaves() {
        let x = Tensor::param(arr1(&[1.0f64]).into_dyn());
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
    }

    #[test]
    fn deep_graph_drop_does_not_overflow() {
        let mut x = Tensor::param(arr1(&[1.0f32]).into_dyn());
        for _ in 0..200_000 {
            x = x.add_scalar(1.0);
        }
        drop(x); // must not blow the stack
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        let x = Tensor::param(arr1(&[5.0f64]).into_dyn());
        let y = x.add(&x).sum_all();
        y.backward();
        assert_eq!(x.take_grad().unwrap()[[0]], 2.0);
    }
}
