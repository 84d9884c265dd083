//! Trajectory-level minimum error entropy (T-MEE) losses for action
//! regression, their analytic gradients, and the analysis and experiment
//! tooling built on top of them.
//!
//! Errors follow the `e = predicted − target` convention throughout.

pub mod analysis;
pub mod error;
pub mod gradients;
pub mod kernel;
pub mod losses;
pub mod noise;
pub mod trainer;

pub use error::{Error, Result};
pub use gradients::{
    chain_to_parameters, finite_difference_oracle, relative_error, tmee_gradient, weighted_tmee_gradient,
    GradientField, ParameterAdjoint,
};
pub use kernel::{
    flatten_batch, information_potential, pairwise_kernel, ErrorSet, KernelMatrix, Reduction, SampleIndex,
};
pub use losses::{
    chunk_weights, mse_loss, tmee_loss, total_loss, weighted_tmee_loss, LossBreakdown, LossConfig, Variant,
    WeightVector,
};
