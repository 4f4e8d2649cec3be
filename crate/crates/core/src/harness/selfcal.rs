//! Marginal self-calibration of balanced transport.
//!
//! With `τ = 1` every simulation column carries mass `1/n_s`, so pooling the
//! mixture posteriors over all observations gives back the average of the
//! simulation posteriors, which should match the prior.

use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::metrics::ks_statistic;
use super::HarnessError;
use crate::npe::FlowModel;
use crate::rope::{PosteriorEstimator, RopeConfig, RopeContext};
use crate::seed;
use crate::simulators::{simulate_dataset, Simulator, SplitRole, Splits, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCalConfig {
    pub n_obs: usize,
    /// `None` matches `n_obs`.
    pub n_sim: Option<usize>,
    pub gamma: f64,
    pub tau: f64,
    /// Pooled posterior draws.
    pub pooled: usize,
    pub bank_chunk: usize,
    pub seed: u64,
}

impl Default for SelfCalConfig {
    fn default() -> Self {
        Self {
            n_obs: 2000,
            n_sim: None,
            gamma: 0.5,
            tau: 1.0,
            pooled: 100_000,
            bank_chunk: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCalReport {
    /// Kolmogorov–Smirnov distance to the prior marginal, per dimension.
    pub ks: Vec<f64>,
    /// `max_j |Σ_i P_ij − 1/n_s|`
    pub column_error: f64,
    pub row_error: f64,
    pub converged: bool,
    pub iterations: usize,
    pub pooled: usize,
}

/// Pools `cfg.pooled` draws with observation indices drawn uniformly and
/// compares each marginal with the prior. Observations are real
/// (misspecified) draws with prior parameters; the statistic network is not
/// fine-tuned.
pub fn self_calibration(
    flow: Arc<FlowModel>,
    sim: &Task,
    cfg: &SelfCalConfig,
) -> Result<SelfCalReport, HarnessError> {
    if cfg.n_obs == 0 || cfg.pooled == 0 {
        return Err(HarnessError::Config(
            "n_obs and pooled must be at least 1".into(),
        ));
    }
    let test = simulate_dataset(
        sim,
        sim.prior(),
        cfg.n_obs,
        seed::derive_named(cfg.seed, "observations"),
        true,
        SplitRole::Test,
    )?;
    let splits = Splits {
        calibration: test.subset(&[], SplitRole::Calibration),
        calibration_val: test.subset(&[], SplitRole::CalibrationVal),
        test,
    };
    let rope = RopeConfig {
        gamma: cfg.gamma,
        tau: cfg.tau,
        n_sim: cfg.n_sim,
        bank_chunk: cfg.bank_chunk,
        seed: seed::derive_named(cfg.seed, "rope"),
        skip_finetune: true,
        ..RopeConfig::default()
    };
    let run = RopeContext::prepare(flow, sim, &splits, &rope)?.posterior(cfg.gamma, cfg.tau)?;

    let mut counts = vec![0usize; cfg.n_obs];
    let pick = Uniform::new(0, cfg.n_obs).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut rng = seed::rng(seed::derive_named(cfg.seed, "pool"));
    for _ in 0..cfg.pooled {
        counts[pick.sample(&mut rng)] += 1;
    }
    let k = sim.theta_dim();
    let mut columns = vec![Vec::with_capacity(cfg.pooled); k];
    let draws_seed = seed::derive_named(cfg.seed, "draws");
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let s = run
            .posterior
            .sample(i, c, seed::derive(draws_seed, i as u64))?;
        for r in 0..c {
            for (d, col) in columns.iter_mut().enumerate() {
                col.push(s.get(r, d));
            }
        }
    }
    let prior = sim.prior();
    let ks = columns
        .iter()
        .enumerate()
        .map(|(d, col)| ks_statistic(col, |x| prior.marginal_cdf(d, x)))
        .collect();
    let n_s = run.coupling.n_sim() as f64;
    let column_error = run
        .coupling
        .column_sums()
        .iter()
        .map(|c| (c - 1.0 / n_s).abs())
        .fold(0.0, f64::max);
    Ok(SelfCalReport {
        ks,
        column_error,
        row_error: run.coupling.row_error(),
        converged: run.coupling.converged,
        iterations: run.coupling.iterations,
        pooled: cfg.pooled,
    })
}
