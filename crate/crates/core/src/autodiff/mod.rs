//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass; a
//! single reverse sweep from a scalar root produces adjoints for all nodes.
//! Parameters live outside the graph in a [`ParameterStore`], so graphs for
//! different utterances can be built concurrently and their gradients
//! reduced afterwards in a fixed order.

pub mod gradcheck;
mod graph;
pub mod nn;
mod store;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_ladder, GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use store::{AdamConfig, Entry, ParameterStore};
pub use tensor::{sigmoid, sign0, softplus, Real, Tensor};
