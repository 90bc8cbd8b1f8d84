//! peftlab: a desk-scale parameter-efficient fine-tuning laboratory.
//!
//! The crate implements seven parameter-composition adapter methods —
//! LoRA, α-LoRA, AdaLoRA, S2-LoRA, BitFit, IA3, and GLoRA — on top of a
//! small trainable encoder-decoder transformer with its own reverse-mode
//! autodiff engine. It covers adapter attachment, training with sparsity
//! and orthogonality penalties, importance-driven rank allocation,
//! lossless merging back into the base weights, exact trainable-parameter
//! budgeting, and rank-distribution reporting.
//!
//! Start with the `examples/` directory: each example is a runnable tour
//! of one capability. The `peftlab` binary exposes the same machinery as
//! batch subcommands (`pretrain`, `adapt`, `merge`, `report`, `params`,
//! `ablate`).

pub mod alloc;
pub mod cli;
mod error;
pub mod io;
pub mod model;
pub mod peft;
mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{Dtype, Precision, Real};
