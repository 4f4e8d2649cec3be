//! Benchmark simulators, their uniform priors, and labelled datasets.
//!
//! Each simulator is a pure function of `(θ, seed)`. The `misspecified` flag
//! switches to the "real-world" generator of the same task, drawing from the
//! same random stream so the two variants are directly comparable.

mod cells;
mod dataset;
mod pendulum;
mod sir;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Rng};
use crate::tensor::Tensor;

pub use cells::{cell_summaries, CellPopulation, CellSimulator};
pub use dataset::{make_splits, simulate_dataset, LabeledDataset, Provenance, SplitRole, Splits};
pub use pendulum::{Pendulum, PendulumDraw};
pub use sir::{summaries as sir_summaries, Sir, SirTrajectory};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("parameter {theta:?} outside prior support of `{task}`")]
    OutOfSupport { task: String, theta: Vec<f64> },
    #[error("expected {expected} parameters, got {got}")]
    ThetaDim { expected: usize, got: usize },
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("split: {0}")]
    Split(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three synthetic benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Cs,
    Sir,
    Pendulum,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::Cs => "cs",
            TaskId::Sir => "sir",
            TaskId::Pendulum => "pendulum",
        }
    }

    pub fn simulator(self) -> Task {
        match self {
            TaskId::Cs => Task::Cs(CellSimulator::default()),
            TaskId::Sir => Task::Sir(Sir::default()),
            TaskId::Pendulum => Task::Pendulum(Pendulum::default()),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cs" | "a" => Ok(TaskId::Cs),
            "sir" | "b" => Ok(TaskId::Sir),
            "pendulum" | "c" => Ok(TaskId::Pendulum),
            other => Err(SimError::Format(format!("unknown task `{other}`"))),
        }
    }
}

/// Parameter vector tagged with its task.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub task: TaskId,
    pub values: Vec<f64>,
}

/// Observation vector tagged with task and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub task: TaskId,
    pub provenance: Provenance,
    pub values: Vec<f64>,
}

/// Product of independent uniforms `U[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrior {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxPrior {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h), "empty prior box");
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&t, (&l, &h))| t >= l && t <= h)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    /// `−log(volume)` inside the box, `−∞` outside.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.volume().ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Marginal CDF of dimension `dim`.
    pub fn marginal_cdf(&self, dim: usize, x: f64) -> f64 {
        ((x - self.lo[dim]) / (self.hi[dim] - self.lo[dim])).clamp(0.0, 1.0)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
            .collect()
    }

    /// `n` i.i.d. draws as an `[n, k]` matrix.
    pub fn sample_n(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let data = (0..n).flat_map(|_| self.sample(&mut rng)).collect();
        Tensor::matrix(n, self.dim(), data).unwrap()
    }

    /// Latin-hypercube draws: every marginal has exactly one point per `1/n` stratum.
    pub fn latin_hypercube(&self, n: usize, seed: u64) -> Tensor {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng(seed);
        let k = self.dim();
        let mut data = vec![0.0; n * k];
        for d in 0..k {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            for (i, s) in strata.into_iter().enumerate() {
                let u = (s as f64 + rng.random::<f64>()) / n as f64;
                data[i * k + d] = self.lo[d] + (self.hi[d] - self.lo[d]) * u;
            }
        }
        Tensor::matrix(n, k, data).unwrap()
    }

    /// The box restricted to the lower half of every dimension.
    pub fn lower_half(&self) -> Self {
        let hi = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        Self::new(self.lo.clone(), hi)
    }
}

/// Anything that maps `(θ, seed)` to an observation vector.
pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn prior(&self) -> &BoxPrior;
    fn obs_dim(&self) -> usize;
    fn simulate(&self, theta: &[f64], seed: u64, misspecified: bool) -> Result<Vec<f64>, SimError>;

    fn theta_dim(&self) -> usize {
        self.prior().dim()
    }

    /// Summary dimension used by the statistic network for this task.
    fn summary_dim(&self) -> usize {
        self.theta_dim().min(self.obs_dim())
    }

    /// Hidden widths of the statistic network for this task.
    fn nse_hidden(&self) -> Vec<usize> {
        let k = self.theta_dim();
        vec![4 * k, 16 * k, 16 * k, 12 * k]
    }
}

/// Checks dimension and support, returning a descriptive error.
pub(crate) fn check_theta(sim: &dyn Simulator, theta: &[f64]) -> Result<(), SimError> {
    if theta.len() != sim.theta_dim() {
        return Err(SimError::ThetaDim {
            expected: sim.theta_dim(),
            got: theta.len(),
        });
    }
    if !sim.prior().contains(theta) {
        return Err(SimError::OutOfSupport {
            task: sim.name().to_string(),
            theta: theta.to_vec(),
        });
    }
    Ok(())
}

/// Simulates every row of `thetas`; row `i` uses seed `derive(seed, i)`.
pub fn simulate_batch(
    sim: &dyn Simulator,
    thetas: &Tensor,
    seed: u64,
    misspecified: bool,
) -> Result<Tensor, SimError> {
    let n = thetas.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| sim.simulate(thetas.row(i), seed::derive(seed, i as u64), misspecified))
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, sim.obs_dim()]));
    }
    Ok(Tensor::from_rows(&rows).expect("simulators return fixed-length rows"))
}

/// Draws `n` prior parameters and their simulations.
pub fn sample_pairs(
    sim: &dyn Simulator,
    prior: &BoxPrior,
    n: usize,
    seed: u64,
    misspecified: bool,
) -> Result<(Tensor, Tensor), SimError> {
    let thetas = prior.sample_n(n, seed::derive_named(seed, "theta"));
    let obs = simulate_batch(sim, &thetas, seed::derive_named(seed, "obs"), misspecified)?;
    Ok((thetas, obs))
}

/// Enum dispatch over the built-in tasks.
#[derive(Debug, Clone)]
pub enum Task {
    Cs(CellSimulator),
    Sir(Sir),
    Pendulum(Pendulum),
}

impl Task {
    pub fn id(&self) -> TaskId {
        match self {
            Task::Cs(_) => TaskId::Cs,
            Task::Sir(_) => TaskId::Sir,
            Task::Pendulum(_) => TaskId::Pendulum,
        }
    }

    fn inner(&self) -> &dyn Simulator {
        match self {
            Task::Cs(s) => s,
            Task::Sir(s) => s,
            Task::Pendulum(s) => s,
        }
    }

    /// Typed wrapper around [`Simulator::simulate`].
    pub fn observe(
        &self,
        theta: &ThetaVector,
        seed: u64,
        misspecified: bool,
    ) -> Result<Observation, SimError> {
        let values = self.simulate(&theta.values, seed, misspecified)?;
        Ok(Observation {
            task: self.id(),
            provenance: if misspecified {
                Provenance::Real
            } else {
                Provenance::Simulated
            },
            values,
        })
    }

    pub fn prior_sample(&self, seed: u64) -> ThetaVector {
        ThetaVector {
            task: self.id(),
            values: self.prior().sample(&mut seed::rng(seed)),
        }
    }
}

impl Simulator for Task {
    fn name(&self) -> &str {
        self.inner().name()
    }
    fn prior(&self) -> &BoxPrior {
        self.inner().prior()
    }
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn simulate(&self, theta: &[f64], seed: u64, misspecified: bool) -> Result<Vec<f64>, SimError> {
        self.inner().simulate(theta, seed, misspecified)
    }
    fn summary_dim(&self) -> usize {
        self.inner().summary_dim()
    }
    fn nse_hidden(&self) -> Vec<usize> {
        self.inner().nse_hidden()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi2_uniform_pvalue(xs: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
        let mut counts = vec![0usize; bins];
        for &x in xs {
            let b = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let e = xs.len() as f64 / bins as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn prior_histograms_are_uniform() {
        for task in [TaskId::Cs, TaskId::Sir, TaskId::Pendulum] {
            let sim = task.simulator();
            let prior = sim.prior();
            let draws = prior.sample_n(100_000, 11);
            for d in 0..prior.dim() {
                let col: Vec<f64> = (0..draws.rows()).map(|i| draws.get(i, d)).collect();
                assert!(col.iter().all(|&x| x >= prior.lo[d] && x <= prior.hi[d]));
                let p = chi2_uniform_pvalue(&col, prior.lo[d], prior.hi[d], 50);
                assert!(p > 0.01, "{task} dim {d}: p = {p}");
            }
        }
    }

    #[test]
    fn pendulum_prior_log_density() {
        let sim = TaskId::Pendulum.simulator();
        let lp = sim.prior().log_density(&[1.0, 5.0]);
        assert!((lp - (-(3.0f64 * 9.5).ln())).abs() < 1e-15);
        assert!((lp + 3.349_904_087).abs() < 1e-8);
        assert_eq!(sim.prior().log_density(&[3.5, 5.0]), f64::NEG_INFINITY);
        assert_eq!(sim.prior().log_density(&[1.0, 0.1]), f64::NEG_INFINITY);
    }

    #[test]
    fn latin_hypercube_fills_every_stratum() {
        let prior = BoxPrior::new(vec![0.0, 0.5], vec![3.0, 10.0]);
        let n = 200;
        let lhs = prior.latin_hypercube(n, 5);
        for d in 0..2 {
            let mut strata: Vec<usize> = (0..n)
                .map(|i| ((prior.marginal_cdf(d, lhs.get(i, d))) * n as f64) as usize)
                .collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn every_simulator_is_seed_deterministic() {
        for task in [TaskId::Cs, TaskId::Sir, TaskId::Pendulum] {
            let sim = task.simulator();
            let theta = sim.prior_sample(3);
            for mis in [false, true] {
                let a = sim.observe(&theta, 99, mis).unwrap();
                let b = sim.observe(&theta, 99, mis).unwrap();
                assert_eq!(a.values.len(), sim.obs_dim());
                assert!(a
                    .values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
                assert!(a.values.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn observation_dims_match_tasks() {
        assert_eq!(TaskId::Cs.simulator().obs_dim(), 4);
        assert_eq!(TaskId::Sir.simulator().obs_dim(), 6);
        assert_eq!(TaskId::Pendulum.simulator().obs_dim(), 200);
        assert_eq!(TaskId::Cs.simulator().theta_dim(), 3);
        assert_eq!(TaskId::Sir.simulator().theta_dim(), 2);
        assert_eq!(TaskId::Pendulum.simulator().theta_dim(), 2);
    }

    #[test]
    fn out_of_support_is_rejected() {
        let sim = TaskId::Pendulum.simulator();
        assert!(matches!(
            sim.simulate(&[4.0, 1.0], 0, false),
            Err(SimError::OutOfSupport { .. })
        ));
        assert!(matches!(
            sim.simulate(&[1.0], 0, false),
            Err(SimError::ThetaDim { .. })
        ));
    }
}
