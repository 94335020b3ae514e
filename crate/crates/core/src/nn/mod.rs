//! Minimal reverse-mode autodiff stack the models are built on: a per-pass
//! tape ([`graph::Graph`]), tensor ops ([`ops`]), a parameter registry
//! ([`params::ParamStore`]), initializers, AdamW, and finite-difference
//! checking helpers.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;

pub use graph::{Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
