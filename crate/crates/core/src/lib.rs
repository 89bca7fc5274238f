//! Differentiable duration modeling and alignment toolkit.
//!
//! The crate bundles a small reverse-mode differentiation engine, a banded
//! Soft-DTW loss with exact oracles, the learned token-to-frame upsampler,
//! a toy non-autoregressive acoustic model with its trainer, a synthetic
//! corpus generator with known ground-truth durations, and the `duralign`
//! command-line front end.

pub mod aligner;
pub mod autodiff;
pub mod cli;
pub mod data;
mod error;
pub mod exec;
pub mod model;
pub mod softdtw;

pub use autodiff::{Graph, ParameterStore, Real, Tensor, Var};
pub use error::{Error, Result};
pub use exec::ExecPolicy;
