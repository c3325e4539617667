//! Dynamic reverse-mode graph.
//!
//! A [`Var`] owns its value and, when gradients are being tracked, strong
//! references to its parents plus a backward closure. With tracking disabled
//! (see [`no_grad`]) a node keeps nothing but its value, so intermediates are
//! released as soon as the last handle drops. Graphs are confined to the
//! thread that built them.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{FtmError, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FIRST_NON_FINITE: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with gradient tracking disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Name of the first op that produced a non-finite value on this thread since
/// the last call (debug builds only).
pub fn take_first_non_finite() -> Option<&'static str> {
    FIRST_NON_FINITE.with(|c| c.take())
}

/// Given the output gradient, the parents and the output value, returns one
/// optional gradient per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a node in the computation graph.
pub struct Var<T: Real = f32>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    /// Trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        if cfg!(debug_assertions) && !value.all_finite() {
            FIRST_NON_FINITE.with(|c| {
                if c.get().is_none() {
                    c.set(Some(op));
                }
            });
        }
        let track = grad_enabled() && parents.iter().any(Var::requires_grad);
        if track {
            Var(Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Self::leaf(value, false)
        }
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    /// Mutable access for optimizers. Must not be called while a graph that
    /// depends on this leaf is still awaiting its backward pass.
    pub fn value_mut(&self) -> RefMut<'_, Tensor<T>> {
        self.0.value.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    fn accumulate(&self, g: Tensor<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Back-propagates from this node, which must hold a single element.
    /// Gradients accumulate into every leaf with `requires_grad`; gradients
    /// of interior nodes are released once propagated.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(FtmError::shape("backward", &self.shape(), &[1]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate(Tensor::full(&self.shape(), T::one()));
        for node in order.iter().rev() {
            let Some(bw) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let grads = {
                let value = node.0.value.borrow();
                bw(&g, &node.0.parents, &value)
            };
            for (parent, pg) in node.0.parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate(pg);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&v.0);
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;

    #[test]
    fn no_grad_drops_parents() {
        let w = Var::param(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = no_grad(|| ops::relu(&w));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(grad_enabled());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x * x) => dy/dx = 2x
        let x = Var::param(Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = ops::sum_all(&ops::mul(&x, &x).unwrap());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
    }
}
