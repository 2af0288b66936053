//! Reverse-mode differentiation: a tape-based [`Graph`] recording tensor
//! operations with saved activations, plus an independent finite-difference
//! oracle ([`finite_diff_grad`]) and the [`grad_check`] harness that compares
//! the two on every differentiable building block in the crate.

mod binder;
mod fd;
mod graph;

pub use binder::{Binder, ConvNodes};
pub use fd::{finite_diff_grad, grad_check, GradCheckSpec, GradReport, FD_BUDGET};
pub use graph::{Graph, NodeId, LAYERNORM_EPS};
