//! Hybrid-supervised segmentation with learned per-instance weights.
//!
//! Weakly-annotated training pairs each carry a weight `γ_k ∈ [0,1]` that is
//! tuned by gradient descent on the loss of the strongly-annotated subset,
//! using influence-style estimates of `∂L_S/∂γ_k`. A dual-network trainer
//! with foreground-paste mixing and cross-network pseudo masks can serve as
//! the lower-level learner.
//!
//! Module map:
//! - [`model`]: per-pixel classifiers (convex softmax regression and a tiny
//!   MLP), losses, gradients, SGD and the exact Hessian of the convex model.
//! - [`dii`]: the weight vector, its Adam optimizer and the alternating
//!   lower/upper training loop.
//! - [`dcr`]: the co-regularized dual-network trainer.
//! - [`synth`]: seeded synthetic datasets with distorted weak annotations.
//! - [`metrics`]: Dice, ASSD and weight diagnostics.
//! - [`oracle`]: retraining-based ground truth for the influence estimates.
//! - [`config`] and [`experiment`]: the experiment harness behind the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dcr;
pub mod dii;
mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
