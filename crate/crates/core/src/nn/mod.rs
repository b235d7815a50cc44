//! Differentiable numerical kernels: parameter storage, a matrix-level
//! reverse-mode tape, the MLP/GRU/attention building blocks, and a
//! finite-difference gradient-check harness.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;

pub use gradcheck::{all_entries, grad_check, sample_entries, FD_STEP};
pub use ops::{
    gru_step, masked_softmax, mlp_forward, scaled_dot_attention, self_attention_block, tile_rows,
    AttnParams, GruParams, HiddenSeq, LayerParams,
};
pub use params::{GradStore, ParamId, ParamStore};
pub use tape::{Tape, Var};
