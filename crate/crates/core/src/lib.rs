//! Multi-class anomaly detection toolkit built around reverse distillation:
//! a frozen teacher encoder, a trainable bottleneck and student decoder,
//! class-prior prompt tokens injected through cross-attention, and a style
//! adapter that modulates the decoder through AdaIN to stay robust under
//! corrupted test distributions. Ships with dataset tooling (MVTec-style
//! layouts, a procedural toy dataset, deterministic corruption generation),
//! training, and an evaluation suite (I-AUROC, P-AUROC, P-AUPRO).

pub mod arch;
pub mod adapter;
pub mod backbone;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
