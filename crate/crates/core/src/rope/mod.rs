//! Robust posterior estimation on top of a trained NPE.
//!
//! 1. fine-tune a copy `g` of the statistic network `h` so that `g(x_o)`
//!    matches the simulated summaries of the calibration labels;
//! 2. simulate `n_s` observations from the prior;
//! 3. cost `C_ij = ‖g(x_o^i) − h(x_s^j)‖₂`;
//! 4. semi-balanced Sinkhorn coupling `P⋆`;
//! 5. `p̃(θ | x_o^i) = Σ_j α_ij p̃(θ | x_s^j)` with `α = n_o P⋆`.
//!
//! Baselines and ablations share the [`PosteriorEstimator`] interface.

mod baselines;
mod cost;
mod finetune;
mod mixture;
mod pipeline;

use std::sync::Arc;

use thiserror::Error;

pub use baselines::{
    baseline_jnpe, baseline_mlp, baseline_npe_direct, baseline_prior, flow_lpp, jnpe_batch,
    sbi_reference, tuning_only, GaussianPosterior, JnpeConfig, MlpConfig,
};
pub use cost::{build_cost, summary_cost};
pub use finetune::{finetune_nse, mc_targets, summary_loss, FineTuneConfig, FineTuneReport};
pub use mixture::{assemble_posterior, MixturePosterior, SampleBanks, MIN_COMPONENT_WEIGHT};
pub use pipeline::{
    content_hash, run_rope, simulation_set, CouplingDiagnostics, ProvenanceRecord, RopeConfig,
    RopeContext, RopeRun,
};

use crate::npe::{FlowModel, NpeError};
use crate::ot::OtError;
use crate::simulators::{BoxPrior, SimError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RopeError {
    #[error(transparent)]
    Npe(#[from] NpeError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("mixture row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("observation index {index} out of range for {n} observations")]
    Index { index: usize, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A posterior for each of `n_obs` observations.
pub trait PosteriorEstimator: Send + Sync {
    fn n_obs(&self) -> usize;
    fn theta_dim(&self) -> usize;
    /// `log p̃(θ | x_i)`, possibly `−∞`.
    fn log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError>;
    /// `n` draws from `p̃(· | x_i)`, a pure function of `seed`.
    fn sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError>;
}

pub(crate) fn check_index(i: usize, n: usize) -> Result<(), RopeError> {
    if i >= n {
        return Err(RopeError::Index { index: i, n });
    }
    Ok(())
}

/// The prior, whatever the observation.
#[derive(Debug, Clone)]
pub struct PriorPosterior {
    pub prior: BoxPrior,
    pub n_obs: usize,
}

impl PosteriorEstimator for PriorPosterior {
    fn n_obs(&self) -> usize {
        self.n_obs
    }

    fn theta_dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError> {
        check_index(i, self.n_obs)?;
        Ok(self.prior.log_density(theta))
    }

    fn sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError> {
        check_index(i, self.n_obs)?;
        Ok(self.prior.sample_n(n, seed))
    }
}

/// The flow conditioned on one fixed summary per observation.
#[derive(Debug, Clone)]
pub struct FlowPosterior {
    pub flow: Arc<FlowModel>,
    /// `[n_obs, l]`
    pub summaries: Tensor,
}

impl FlowPosterior {
    /// Conditions on `h(x_i)` for each row of `x`.
    pub fn from_observations(flow: Arc<FlowModel>, x: &Tensor) -> Result<Self, RopeError> {
        let summaries = flow.summaries(x)?;
        Ok(Self { flow, summaries })
    }

    /// `log p̃(θ_i | s_i)` for all rows at once.
    pub fn log_prob_paired(&self, thetas: &Tensor) -> Result<Vec<f64>, RopeError> {
        Ok(self.flow.log_prob(thetas, &self.summaries)?)
    }
}

impl PosteriorEstimator for FlowPosterior {
    fn n_obs(&self) -> usize {
        self.summaries.rows()
    }

    fn theta_dim(&self) -> usize {
        self.flow.theta_dim()
    }

    fn log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError> {
        check_index(i, self.n_obs())?;
        let t = Tensor::matrix(1, theta.len(), theta.to_vec())?;
        let s = self.summaries.select_rows(&[i]);
        Ok(self.flow.log_prob(&t, &s)?[0])
    }

    fn sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError> {
        check_index(i, self.n_obs())?;
        Ok(self.flow.sample(self.summaries.row(i), n, seed)?)
    }
}
