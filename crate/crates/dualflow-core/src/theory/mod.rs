//! Executable verification of the two supporting theoretical results: the
//! objective-ascending boundary-damped flow construction, and the
//! per-timestep cascading improvement of the training loop.

mod cascade;
mod morse;

pub use cascade::{verify_cascade, CascadeCheckConfig, CascadeReport};
pub use morse::{
    build_morse_field, cutoff_eta, mu_defining, verify_morse_flow, MorseProblem, MorseReport,
    TestFunction,
};
