//! Scoring posteriors and running experiment grids.
//!
//! [`metrics`] turns any [`PosteriorEstimator`](crate::rope::PosteriorEstimator)
//! into LPP, ACAUC and coverage numbers, [`run_experiment`] sweeps methods,
//! calibration sizes, `γ`, `τ` and repetitions, and [`self_calibration`]
//! checks that the test-averaged balanced posterior reproduces the prior.

mod config;
mod experiment;
pub mod metrics;
mod selfcal;

use thiserror::Error;

pub use config::{ExperimentConfig, Method, RealPrior};
pub use experiment::{
    real_pool, run_experiment, run_grid, train_models, write_outputs, CellKey, CornerDump,
    ExperimentOutcome, MetricsReport, RESULTS_HEADER,
};
pub use metrics::{compute_acauc, compute_lpp, coverage_curve, CoverageCurve, CredibleLevels, Lpp};
pub use selfcal::{self_calibration, SelfCalConfig, SelfCalReport};

use crate::npe::NpeError;
use crate::ot::OtError;
use crate::rope::RopeError;
use crate::simulators::SimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Npe(#[from] NpeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
