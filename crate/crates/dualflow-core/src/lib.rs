//! Desk-scale workbench for flow-based targeted adversarial attacks.
//!
//! A pretrained forward flow carries an image toward noise; a LoRA-adapted
//! reverse flow carries it back under a target-class condition; the result is
//! clipped to an l-infinity budget. The crate provides the tensor/autodiff
//! engine, the velocity and classifier networks, the flow integrators, the
//! cascading per-timestep training loop and its variants, numerical verifiers
//! for the two supporting theoretical results, and the evaluation harness.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
