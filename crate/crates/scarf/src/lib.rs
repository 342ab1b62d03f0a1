//! Missing-modality-robust infrared–visible fusion components.
//!
//! The crate implements, at desk scale and in pure Rust:
//!
//! - a minimal dense-tensor reverse-mode autodiff core with a
//!   finite-difference gradient oracle ([`tensor`], [`tape`], [`gradcheck`]);
//! - modality-agnostic deformable attention with a complete-modality split
//!   path and an incomplete-modality double-sampling path ([`mada`]);
//! - the Scarf Neck: per-scale attention blocks plus 1×1 fusion, with a
//!   duplication path when one modality is missing ([`neck`]);
//! - batch construction under none / vanilla / pseudo modality-dropout
//!   policies ([`batching`]);
//! - deterministic modality-incomplete test manifests and a COCO-style
//!   detection evaluator ([`benchmark`]);
//! - a synthetic two-modality detection harness that trains the full stack
//!   and reproduces the robustness trends directionally ([`synth`]).
//!
//! Start with the runnable examples (`cargo run --release --example ...`),
//! or the `scarf` binary for the same workflows as subcommands.

pub mod batching;
pub mod benchmark;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod mada;
pub mod neck;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Result, ScarfError};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
