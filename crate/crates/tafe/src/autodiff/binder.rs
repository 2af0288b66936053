//! Binding model parameters onto a tape.
//!
//! The tape is rebuilt every training step, so each step starts by turning
//! every parameter tensor into a leaf node. A [`Binder`] does that while
//! recording `(name, node)` pairs in binding order; the optimizer reads
//! gradients back through those ids, and checkpoints reuse the same names.
//! Binding order is the canonical parameter order everywhere.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::{ConvKernel, Tensor};

/// Wraps a graph and names every parameter leaf it creates.
pub struct Binder<'g> {
    graph: &'g mut Graph,
    bound: Vec<(String, NodeId)>,
}

/// A convolution kernel bound onto the tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    pub weights: NodeId,
    pub bias: Option<NodeId>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph) -> Self {
        Self {
            graph,
            bound: Vec::new(),
        }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    /// Binds one tensor as a trainable leaf under `name`.
    pub fn tensor(&mut self, name: impl Into<String>, t: &Tensor) -> NodeId {
        let id = self.graph.param(t.clone());
        self.bound.push((name.into(), id));
        id
    }

    /// Binds a kernel as `{name}.weight` plus `{name}.bias` when present.
    pub fn conv(&mut self, name: &str, k: &ConvKernel) -> ConvNodes {
        let weights = self.tensor(format!("{name}.weight"), &k.weights);
        let bias = k.bias.as_ref().map(|b| self.tensor(format!("{name}.bias"), b));
        ConvNodes { weights, bias }
    }

    /// All `(name, node)` pairs in binding order.
    pub fn bound(&self) -> &[(String, NodeId)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, NodeId)> {
        self.bound
    }
}
