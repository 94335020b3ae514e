//! Reverse-mode automatic differentiation on dynamically shaped `f64`
//! tensors. A [`Graph`] is a Wengert list built per forward pass: every
//! operation appends a node holding its value and a closure that routes the
//! incoming gradient to the node's parents. Nothing here is shared between
//! steps, so graphs are cheap to drop and safe to build in parallel.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::nn::params::ParamId;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Sink the backward closures accumulate parent gradients into.
pub struct GradSink<'a> {
    grads: &'a mut [Option<ArrayD<f64>>],
}

impl<'a> GradSink<'a> {
    pub fn add(&mut self, var: Var, contribution: ArrayD<f64>) {
        match &mut self.grads[var.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Arc<ArrayD<f64>>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// One forward pass worth of computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn of(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for a registered parameter; `None` when the parameter never
    /// entered the graph or received no gradient.
    pub fn of_param(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.param_nodes.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Consume into a per-parameter gradient map (params without a gradient
    /// are absent, which downstream code treats as "leave untouched").
    pub fn into_param_map(mut self) -> HashMap<ParamId, ArrayD<f64>> {
        let mut out = HashMap::new();
        for (id, var) in self.param_nodes.iter() {
            if let Some(g) = self.grads[var.0].take() {
                out.insert(*id, g);
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, var: Var) -> &ArrayD<f64> {
        &self.nodes[var.0].value
    }

    pub fn value_arc(&self, var: Var) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.nodes[var.0].value)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("non-empty")
    }

    /// Insert a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Arc::new(value), false, None)
    }

    /// Insert a differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Arc::new(value), true, None)
    }

    /// Insert a leaf tied to a parameter id so its gradient can be fetched by
    /// id after backward. Re-registering the same id returns the same node,
    /// which keeps gradient accumulation correct when a parameter is used in
    /// several places.
    pub fn param_leaf(&mut self, id: ParamId, value: Arc<ArrayD<f64>>, trainable: bool) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(value, trainable, None);
        self.param_nodes.insert(id, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        value: Arc<ArrayD<f64>>,
        needs_grad: bool,
        back: Option<BackFn>,
    ) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value entered the graph"
        );
        self.nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op node. `back` receives the node's output gradient and a
    /// sink for parent contributions; it is only stored when some parent
    /// needs a gradient.
    pub(crate) fn op(
        &mut self,
        value: ArrayD<f64>,
        parents: &[Var],
        back: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad(*p));
        let back: Option<BackFn> = if needs { Some(Box::new(back)) } else { None };
        self.push(Arc::new(value), needs, back)
    }

    /// Reverse pass from a scalar `root`. Consumes nothing; the graph can be
    /// inspected afterwards.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward roots must be scalars"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ndarray::ArrayD::ones(self.value(root).shape().to_vec()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            {
                let (before, after) = grads.split_at_mut(i);
                let _ = after;
                let mut sink = GradSink { grads: before };
                back(&gout, &mut sink);
            }
            grads[i] = Some(gout);
        }
        Grads {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
