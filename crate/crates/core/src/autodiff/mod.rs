//! Reverse-mode differentiation of the training loss.

pub mod potential;
pub mod tape;

use crate::error::Result;
use crate::nn_potential::PotentialParams;
use crate::objective::{evaluate_with_grad, LossBreakdown, SampleBatch};
use crate::problems::ProblemSpec;
use crate::trajectories::IntegratorConfig;

/// Objective over `batch` and its gradient with respect to every entry of θ,
/// in the flat layout of [`PotentialParams`].
pub fn grad_loss(
    theta: &PotentialParams,
    batch: &SampleBatch,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    evaluate_with_grad(theta, batch, prob, cfg)
}
