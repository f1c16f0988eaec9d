//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Var`] wraps a [`Tensor`] in a dynamically built computation graph.
//! Graphs are thread-local by construction (nodes are `Rc`); heavy kernels
//! inside individual operators may still fan out with rayon because they
//! work on plain slices.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{KgtError, Result};
use crate::numerics::tensor::{Real, Tensor};

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

/// Given the output gradient, produce one gradient per parent (or `None`
/// for parents that do not need one).
pub(crate) type BackFn<R> = Box<dyn Fn(&Tensor<R>) -> Vec<Option<Tensor<R>>>>;

pub(crate) struct Node<R: Real> {
    id: u64,
    value: Tensor<R>,
    grad: RefCell<Option<Tensor<R>>>,
    parents: Vec<Var<R>>,
    back: Option<BackFn<R>>,
    /// True if a gradient must reach this node (it is a trainable leaf or
    /// sits on a path to one). Constant subgraphs are pruned at build time.
    needs_grad: bool,
}

/// Handle into the computation graph.
#[derive(Clone)]
pub struct Var<R: Real = f32>(pub(crate) Rc<Node<R>>);

impl<R: Real> std::fmt::Debug for Var<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

impl<R: Real> Var<R> {
    /// A leaf that does not receive gradients (inputs, fixed tensors).
    pub fn constant(value: Tensor<R>) -> Self {
        Self(Rc::new(Node {
            id: fresh_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            back: None,
            needs_grad: false,
        }))
    }

    /// A trainable leaf; `backward` accumulates into its grad slot.
    pub fn param(value: Tensor<R>) -> Self {
        Self(Rc::new(Node {
            id: fresh_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            back: None,
            needs_grad: true,
        }))
    }

    /// Internal node constructor. If no parent needs a gradient the result
    /// collapses to a constant leaf and `back` is dropped.
    pub(crate) fn from_op(value: Tensor<R>, parents: Vec<Var<R>>, back: BackFn<R>) -> Self {
        let needs = parents.iter().any(|p| p.0.needs_grad);
        if !needs {
            return Self::constant(value);
        }
        Self(Rc::new(Node {
            id: fresh_id(),
            value,
            grad: RefCell::new(None),
            parents,
            back: Some(back),
            needs_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Gradient accumulated by the latest `backward` call (leaves only).
    pub fn grad(&self) -> Option<Tensor<R>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn accumulate(&self, g: Tensor<R>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign_tensor(&g),
            None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar output. Gradients land in the leaf vars'
    /// grad slots; interior grads are dropped as soon as they are consumed.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(KgtError::Dim {
                context: "backward",
                detail: format!("expected scalar output, got shape {:?}", self.shape()),
            });
        }
        if !self.0.needs_grad {
            return Ok(()); // nothing reachable wants a gradient
        }

        // Collect the reachable subgraph. Node ids increase from parents to
        // children, so descending id order is a valid reverse topological
        // order.
        let mut reachable: HashMap<u64, Var<R>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if reachable.insert(v.0.id, v.clone()).is_none() {
                for p in &v.0.parents {
                    if p.0.needs_grad && !reachable.contains_key(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
        }
        let mut order: Vec<&Var<R>> = reachable.values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate(Tensor::full(self.shape(), R::ONE));
        for v in order {
            let Some(back) = v.0.back.as_ref() else {
                continue; // leaf: keep the accumulated grad for the caller
            };
            let Some(g) = v.0.grad.borrow_mut().take() else {
                continue;
            };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), v.0.parents.len());
            for (p, pg) in v.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.0.needs_grad {
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        p.accumulate(pg);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_graphs_record_nothing() {
        let a = Var::constant(Tensor::<f32>::full(&[2], 3.0));
        let b = Var::constant(Tensor::<f32>::full(&[2], 4.0));
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.0.parents.is_empty());
    }

    #[test]
    fn add_backward_routes_to_both_leaves() {
        let a = Var::param(Tensor::<f32>::full(&[3], 1.0));
        let b = Var::param(Tensor::<f32>::full(&[3], 2.0));
        let s = a.add(&b).unwrap().sum_all();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diamond_graph_accumulates() {
        // y = sum(x + x) => dy/dx = 2
        let x = Var::param(Tensor::<f32>::full(&[2], 5.0));
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(y.value().data(), &[20.0]);
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Var::param(Tensor::<f32>::zeros(&[2, 2]));
        assert!(x.backward().is_err());
    }
}
