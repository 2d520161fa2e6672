//! Knowledge-distillation laboratory.
//!
//! Loss suite (CE, label smoothing, KD and the partial-teacher variants), a
//! synthetic classification benchmark with controllable class similarity, a
//! small tanh MLP with hand-written backprop, the training loop, and the
//! diagnostics used to study why distillation helps.

pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod mathcore;
pub mod mlp;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
