//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every differentiable op evaluates its
//! output eagerly and, when any input is tracked, appends a node holding the
//! indices of its tracked inputs plus a backward closure capturing whatever
//! activations the rule needs. Inputs always precede outputs on the tape, so
//! a reverse sweep in append order is a valid topological order.
//!
//! Values live in [`Var`]s behind an `Arc`; an untracked `Var` (no node) is
//! freed as soon as the last handle drops, which keeps no-grad inference at
//! roughly the footprint of the live activations.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod reduce;
mod shape;
mod spectral;

use std::collections::HashMap;
use std::sync::Arc;

pub use conv::PadMode;
pub(crate) use spectral::phase_of;
pub use norm::BatchStats;
pub use reduce::ReduceOp;

use crate::error::{contract_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle to a value produced by (or fed into) a [`Graph`].
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
    trace: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

struct Node<T> {
    tag: &'static str,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// One op in an execution trace: output footprint and producer indices.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub tag: &'static str,
    pub bytes: usize,
    pub inputs: Vec<usize>,
}

/// Append-only autograd tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    check_finite: bool,
    trace: Option<Vec<TraceEntry>>,
    polar_clamps: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Recording graph. Finite checks default to on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
            trace: None,
            polar_clamps: 0,
        }
    }

    /// Graph that records nothing; ops only evaluate.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Also log every op (tracked or not) into an execution trace.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of negative amplitudes clamped to zero by `polar` so far.
    pub fn polar_clamps(&self) -> usize {
        self.polar_clamps
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceEntry>> {
        self.trace.take()
    }

    /// Operation tag of each node, in tape order.
    pub fn tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.tag).collect()
    }

    /// Parent indices of node `id`.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id].inputs.iter().flatten().copied().collect()
    }

    fn trace_leaf(&mut self, tag: &'static str, value: &Tensor<T>) -> Option<usize> {
        let trace = self.trace.as_mut()?;
        trace.push(TraceEntry {
            tag,
            bytes: value.numel() * T::DTYPE.size_of(),
            inputs: Vec::new(),
        });
        Some(trace.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        let trace = self.trace_leaf("constant", &value);
        Var {
            value: Arc::new(value),
            node: None,
            trace,
        }
    }

    /// Tracked input whose gradient can be read back from [`Gradients::of`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf_inner("leaf", Arc::new(value), None)
    }

    /// Tracked parameter leaf. Using the same id twice shares the weight:
    /// both uses accumulate into the one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        self.leaf_inner("param", store.value_arc(id), Some(id))
    }

    /// Untracked view of a buffer or parameter value.
    pub fn frozen(&mut self, value: Arc<Tensor<T>>) -> Var<T> {
        let trace = self.trace_leaf("frozen", &value);
        Var {
            value,
            node: None,
            trace,
        }
    }

    fn leaf_inner(&mut self, tag: &'static str, value: Arc<Tensor<T>>, param: Option<ParamId>) -> Var<T> {
        let trace = self.trace_leaf(tag, &value);
        if !self.grad_enabled {
            return Var {
                value,
                node: None,
                trace,
            };
        }
        self.nodes.push(Node {
            tag,
            inputs: Vec::new(),
            backward: None,
            param,
        });
        Var {
            value,
            node: Some(self.nodes.len() - 1),
            trace,
        }
    }

    /// Appends the result of an op. `backward` maps the output gradient to
    /// one optional gradient per input; the mask says which inputs need one.
    pub(crate) fn record<F>(
        &mut self,
        tag: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: F,
    ) -> Result<Var<T>>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if self.check_finite && !out.all_finite() {
            return Err(Error::NonFinite { op: tag });
        }
        let trace = match self.trace.as_mut() {
            Some(trace) => {
                trace.push(TraceEntry {
                    tag,
                    bytes: out.numel() * T::DTYPE.size_of(),
                    inputs: inputs.iter().filter_map(|v| v.trace).collect(),
                });
                Some(trace.len() - 1)
            }
            None => None,
        };
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            self.nodes.push(Node {
                tag,
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
                param: None,
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            value: Arc::new(out),
            node,
            trace,
        })
    }

    /// Reverse sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        let root = loss
            .node
            .ok_or_else(|| contract_err!("loss does not depend on any tracked value"))?;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::from_parts(loss.shape().to_vec(), vec![T::one()]));

        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        let mut nodes = self.nodes;
        nodes.truncate(root + 1);
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            match node.backward {
                Some(f) => {
                    let mask: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let parent_grads = f(&g, &mask);
                    debug_assert_eq!(parent_grads.len(), node.inputs.len(), "op {}", node.tag);
                    for (input, pg) in node.inputs.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (input, pg) {
                            debug_assert!(*p < id, "parent {p} of node {id} is not earlier");
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
                None => match node.param {
                    Some(pid) => match out.params.get_mut(&pid) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(pid, g);
                        }
                    },
                    None => {
                        out.leaves.insert(id, g);
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, `None` if the loss does not reach it.
    pub fn of(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|n| self.leaves.get(&n))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Adds every parameter gradient into `store`; unreached parameters are
    /// left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, g) in &self.params {
            store.grad_mut(id).add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_case_grad_equals_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.leaf(Tensor::from_vec(&[3], vec![0.3, 0.1, 4.0]).unwrap());
        let p = g.mul(&w, &x).unwrap();
        let loss = g.sum_all(&p).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.of(&w).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn square_grad_is_six_at_three() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(&w, &w).unwrap();
        let loss = g.sum_all(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.of(&w).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[2]));
        let y = g.scale(&w, 2.0).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::ones(&[2]));
        let b = g.leaf(Tensor::ones(&[2]));
        let c = g.add(&a, &b).unwrap();
        let d = g.mul(&c, &a).unwrap();
        let _ = g.sum_all(&d).unwrap();
        for id in 0..g.len() {
            assert!(g.parents(id).iter().all(|&p| p < id));
        }
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(Tensor::ones(&[2]));
        let b = g.add(&a, &a).unwrap();
        assert!(g.is_empty());
        assert!(!b.requires_grad());
    }

    #[test]
    fn finite_check_reports_op() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        let a = g.constant(Tensor::from_vec(&[1], vec![f64::MAX]).unwrap());
        let err = g.add(&a, &a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }
}
