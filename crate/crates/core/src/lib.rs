//! Counterfactual prediction with instrumental variables via two-stage
//! neural networks.
//!
//! The pipeline: a first-stage network models the conditional treatment
//! distribution given covariates and instruments; a second-stage network is
//! trained against an integral loss over that distribution, using exact
//! summation for discrete treatments and unbiased two-sample Monte-Carlo
//! gradients for continuous ones. On top sit out-of-sample validation
//! criteria, split-sample linear-IV inference on the outcome network's final
//! layer, dropout-based posterior predictive bands, classical baselines, and
//! a simulated pricing economy for benchmarking.

pub mod archive;
pub mod baselines;
pub mod data;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod outcome;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod treatment;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
