//! Decision-focused learning with diffusion model predictors.
//!
//! The crate trains a conditional denoising diffusion model end to end
//! through a downstream convex decision problem: model samples feed a
//! sample-average decision layer, implicit differentiation of the layer's KKT
//! conditions turns decision quality into a gradient signal, and two
//! estimators (pathwise reparameterization and a weighted score-function
//! form) carry that signal back to the denoiser parameters. Gaussian and
//! deterministic predictors trained the same way, plus prediction-loss
//! baselines, serve as comparison points, and four benchmark decision tasks
//! exercise the stack.
//!
//! Module map:
//! - [`nn`]: flat-parameter dense networks with hand-rolled VJPs.
//! - [`diffusion`]: DDPM schedule, sampling chain, and denoising losses.
//! - [`decision`]: SAA interior-point solver and KKT factorization.
//! - [`estimators`]: the end-to-end gradient paths through the decision layer.
//! - [`tasks`]: benchmark decision problems, generators, and CSV datasets.
//! - [`twostage`]: prediction-only baseline losses for every predictor family.
//! - [`runner`]: experiment configs, training loops, metrics, checkpoints.
//! - [`validation`]: finite-difference and closed-form Gaussian oracles.

pub mod decision;
pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod nn;
pub mod tasks;
pub mod twostage;
pub mod runner;
pub mod validation;

pub use error::{Error, Result};
