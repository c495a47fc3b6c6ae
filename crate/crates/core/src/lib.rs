//! Tube stochastic differential dynamic programming.
//!
//! A stochastic optimal control problem is turned into a deterministic one by
//! carrying the state belief as unscented sigma points, each with its own
//! control, and the result is solved with a constrained DDP solver. Monte Carlo
//! campaigns then check the optimized controls against sampled noise.

pub mod ddp;
pub mod gaussian;
pub mod montecarlo;
pub mod nominal;
pub mod policy;
pub mod problems;
pub mod transcription;
pub mod validation;
