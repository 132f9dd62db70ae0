//! A desk-scale laboratory for self-predictive representation learning in
//! reinforcement learning.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), MLP
//! agent networks ([`networks`]), the three SSL objective families
//! ([`objectives`]), the RL-specific loss transformations ([`modifiers`]),
//! prioritized replay ([`replay`]), toy grid worlds ([`envs`]), the training
//! loop and variant presets ([`agent`]), aggregate evaluation statistics
//! ([`metrics`]), representation diagnostics ([`diagnostics`]) and the
//! command implementations behind the `sprlab` binary ([`cli`]).

pub mod agent;
pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod modifiers;
pub mod networks;
pub mod objectives;
pub mod replay;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
