//! Predecessor-aware multimodal trajectory prediction.
//!
//! The library models multi-agent scenes on a shared time grid, traces which
//! concurrent neighbors act as predecessors of a target agent via a
//! cross-attention relationship head, and decodes the target's future as a
//! Laplace mixture conditioned on the top-K traced predecessors. Training,
//! evaluation metrics, ablation tooling, and synthetic scene generation are
//! included so the tracing module's benefit is measurable end to end on CPU.

pub mod data;
pub mod error;
pub mod mdn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod predecessor;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
