//! Proximal policy optimisation with policy gradient guidance.
//!
//! The actor carries a learnable null embedding that realises an
//! unconditional branch `π(a|∅)`. Rollouts, updates and evaluation all use
//! the guided policy `π̂(a|s) ∝ π(a|∅)^(1-γ) · π(a|s)^γ`, so `γ` can be
//! changed at test time without retraining.

pub mod autodiff;
pub mod cli;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod eval;
pub mod nets;
pub mod plot;
pub mod rollout;
pub mod scalar;
pub mod tabular;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Param = autodiff::Param<f64>;
pub type AdamState = autodiff::AdamState<f64>;
pub type Mlp = nets::Mlp<f64>;
pub type ActorCritic = nets::ActorCritic<f64>;
pub type GuidedCategorical = distributions::GuidedCategorical<f64>;
pub type GuidedGaussian = distributions::GuidedGaussian<f64>;
