//! Minimal deterministic reverse-mode differentiation with exactly the
//! operations the forecaster needs, plus the AdamW update rule.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use gradcheck::{grad_check, grad_check_store, relative_error, ParamCheck};
pub use graph::{DiffNode, Graph, NodeId};
pub use layers::{affine, ResidualBlock};
pub use params::{xavier_uniform, AdamW, ParamEntry, ParameterStore};

#[cfg(test)]
mod tests;
