//! Neural posterior estimation: statistic network plus conditional flow.
//!
//! A [`FlowModel`] evaluates `log p̃(θ | h(x))` by squashing `θ` from the
//! prior box onto `ℝ^k`, pushing it through a [`ConditionalMaf`] conditioned
//! on the summary `h(x)`, and scoring the result under a standard normal.

mod checkpoint;
mod maf;
mod nse;
mod ppc;
mod squash;
mod train;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use maf::{ConditionalMaf, Made, LOG_SCALE_BOUND};
pub use nse::{nse_apply, Nse};
pub use ppc::{posterior_predictive_check, rank_calibration, PpcReport};
pub use squash::Squash;
pub use train::{mean_log_prob, train_flow, train_npe, TrainConfig, TrainReport, ValidationRecord};

use crate::seed;
use crate::simulators::{SimError, Simulator};
use crate::tensor::{Tape, Tensor, TensorError, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum NpeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{what} dimension: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture descriptor, enough to rebuild a model before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub obs_dim: usize,
    pub summary_dim: usize,
    pub nse_hidden: Vec<usize>,
    pub theta_dim: usize,
    pub flow_layers: usize,
    pub flow_hidden: Vec<usize>,
    pub squash: Squash,
}

impl FlowSpec {
    /// Task defaults: per-task statistic network, squashing from the prior box.
    pub fn for_simulator(sim: &dyn Simulator, flow_layers: usize, flow_hidden: &[usize]) -> Self {
        let prior = sim.prior();
        Self {
            obs_dim: sim.obs_dim(),
            summary_dim: sim.summary_dim(),
            nse_hidden: sim.nse_hidden(),
            theta_dim: sim.theta_dim(),
            flow_layers,
            flow_hidden: flow_hidden.to_vec(),
            squash: Squash::boxed(prior.lo.clone(), prior.hi.clone()),
        }
    }
}

/// Statistic network, conditional flow and θ squashing.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub spec: FlowSpec,
    pub nse: Nse,
    pub flow: ConditionalMaf,
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    pub nse: Vec<Var<'t>>,
    pub flow: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn all(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.nse.iter().chain(&self.flow).copied()
    }
}

impl FlowModel {
    pub fn new(spec: FlowSpec, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let nse = Nse::new(spec.obs_dim, &spec.nse_hidden, spec.summary_dim, &mut rng);
        let flow = ConditionalMaf::new(
            spec.theta_dim,
            spec.summary_dim,
            spec.flow_layers,
            &spec.flow_hidden,
            &mut rng,
        );
        Self { spec, nse, flow }
    }

    pub fn theta_dim(&self) -> usize {
        self.spec.theta_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    pub fn summary_dim(&self) -> usize {
        self.spec.summary_dim
    }

    /// Statistic-network parameters followed by flow parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.nse.mlp.params();
        p.extend(self.flow.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.nse.mlp.params_mut();
        p.extend(self.flow.params_mut());
        p
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<(), NpeError> {
        for (i, p) in self.params().iter().enumerate() {
            p.check_finite(&format!("model parameter {i}"))?;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, train_nse: bool, train_flow: bool) -> Bound<'t> {
        let reg = |p: &Tensor, trainable: bool| {
            if trainable {
                tape.leaf(p)
            } else {
                tape.constant(p)
            }
        };
        Bound {
            nse: self
                .nse
                .mlp
                .params()
                .into_iter()
                .map(|p| reg(p, train_nse))
                .collect(),
            flow: self
                .flow
                .params()
                .into_iter()
                .map(|p| reg(p, train_flow))
                .collect(),
        }
    }

    pub fn summaries(&self, x: &Tensor) -> Result<Tensor, NpeError> {
        self.nse.apply(x)
    }

    fn check_theta(&self, theta: &Tensor) -> Result<(), NpeError> {
        if theta.shape().len() != 2 || theta.cols() != self.theta_dim() {
            return Err(NpeError::Dim {
                what: "theta",
                expected: self.theta_dim(),
                got: theta.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    fn check_summary(&self, summary: &Tensor, n: usize) -> Result<(), NpeError> {
        if summary.shape().len() != 2 || summary.cols() != self.summary_dim() {
            return Err(NpeError::Dim {
                what: "summary",
                expected: self.summary_dim(),
                got: summary.shape().last().copied().unwrap_or(0),
            });
        }
        if summary.rows() != n && summary.rows() != 1 {
            return Err(NpeError::Dim {
                what: "summary rows",
                expected: n,
                got: summary.rows(),
            });
        }
        Ok(())
    }

    /// `log p̃(θ_i | s_i)` per row; `summary` may hold a single shared row.
    ///
    /// Rows on or outside the prior boundary score `−∞`.
    pub fn log_prob(&self, theta: &Tensor, summary: &Tensor) -> Result<Vec<f64>, NpeError> {
        self.check_theta(theta)?;
        let n = theta.rows();
        self.check_summary(summary, n)?;
        self.check_finite()?;
        let k = self.theta_dim();
        let mut z = vec![0.0; n * k];
        let squash_ld: Vec<Option<f64>> = (0..n)
            .map(|i| {
                self.spec
                    .squash
                    .forward(theta.row(i), &mut z[i * k..(i + 1) * k])
            })
            .collect();
        let (u, ld) = self.flow.forward_plain(&z, summary.data(), n);
        Ok((0..n)
            .map(|i| match squash_ld[i] {
                None => f64::NEG_INFINITY,
                Some(sld) => {
                    let sq: f64 = u[i * k..(i + 1) * k].iter().map(|v| v * v).sum();
                    -0.5 * sq - 0.5 * k as f64 * LN_2PI + ld[i] + sld
                }
            })
            .collect())
    }

    /// `log p̃(θ_i | h(x_i))`.
    pub fn log_prob_obs(&self, theta: &Tensor, x: &Tensor) -> Result<Vec<f64>, NpeError> {
        self.log_prob(theta, &self.summaries(x)?)
    }

    /// Recorded `log p̃(θ_i | h(x_i))`, shape `[n]`. Every θ must be interior.
    pub fn log_prob_tape<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        theta: &Tensor,
        ctx: Var<'t>,
    ) -> Result<Var<'t>, NpeError> {
        self.check_theta(theta)?;
        let (n, k) = (theta.rows(), self.theta_dim());
        let mut z = vec![0.0; n * k];
        let mut sld = Vec::with_capacity(n);
        for i in 0..n {
            match self
                .spec
                .squash
                .forward(theta.row(i), &mut z[i * k..(i + 1) * k])
            {
                Some(v) => sld.push(v),
                None => {
                    return Err(NpeError::Sim(SimError::OutOfSupport {
                        task: "flow".into(),
                        theta: theta.row(i).to_vec(),
                    }))
                }
            }
        }
        let zv = tape.constant_owned(Tensor::matrix(n, k, z)?);
        let (u, logdet) = self.flow.forward_tape(tape, &bound.flow, zv, ctx)?;
        let base = u.square().sum_last()?.scale(-0.5);
        let c = tape.constant_owned(Tensor::scalar(-0.5 * k as f64 * LN_2PI));
        let sld = tape.constant_owned(Tensor::vector(sld));
        Ok(base.add(c)?.add(logdet)?.add(sld)?)
    }

    /// Recorded summaries `h(x)`.
    pub fn summaries_tape<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: &Tensor,
    ) -> Result<Var<'t>, NpeError> {
        self.nse.forward(tape, &bound.nse, x)
    }

    /// `n` draws from `p̃(θ | summary)`.
    pub fn sample(&self, summary: &[f64], n: usize, seed: u64) -> Result<Tensor, NpeError> {
        if summary.len() != self.summary_dim() {
            return Err(NpeError::Dim {
                what: "summary",
                expected: self.summary_dim(),
                got: summary.len(),
            });
        }
        if n == 0 {
            return Err(NpeError::Empty("sample count must be at least 1".into()));
        }
        self.check_finite()?;
        let k = self.theta_dim();
        let mut rng = seed::rng(seed);
        let u: Vec<f64> = (0..n * k)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = self.flow.inverse_plain(&u, summary, n);
        let mut theta = vec![0.0; n * k];
        for i in 0..n {
            self.spec
                .squash
                .inverse(&z[i * k..(i + 1) * k], &mut theta[i * k..(i + 1) * k]);
        }
        Ok(Tensor::matrix(n, k, theta)?)
    }

    /// Draws conditioned on the observation `x`.
    pub fn sample_obs(&self, x: &[f64], n: usize, seed: u64) -> Result<Tensor, NpeError> {
        let s = self.summaries(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        self.sample(s.data(), n, seed)
    }
}

/// Flow log-density for a batch.
pub fn flow_log_prob(
    model: &FlowModel,
    theta: &Tensor,
    summary: &Tensor,
) -> Result<Vec<f64>, NpeError> {
    model.log_prob(theta, summary)
}

/// `n` flow draws for one summary.
pub fn flow_sample(
    model: &FlowModel,
    summary: &[f64],
    n: usize,
    seed: u64,
) -> Result<Tensor, NpeError> {
    model.sample(summary, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded_model(k: usize) -> FlowModel {
        let spec = FlowSpec {
            obs_dim: 3,
            summary_dim: 2,
            nse_hidden: vec![4],
            theta_dim: k,
            flow_layers: 5,
            flow_hidden: vec![8, 8],
            squash: Squash::unbounded(k),
        };
        FlowModel::new(spec, 0)
    }

    #[test]
    fn identity_flow_at_origin() {
        let m = unbounded_model(2);
        let lp = m
            .log_prob(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]))
            .unwrap();
        assert!((lp[0] + 1.837877).abs() < 1e-6);
        assert!((lp[0] + LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn out_of_support_is_neg_inf() {
        let spec = FlowSpec {
            squash: Squash::boxed(vec![0.0, 0.5], vec![3.0, 10.0]),
            ..unbounded_model(2).spec
        };
        let m = FlowModel::new(spec, 1);
        let theta = Tensor::from_rows(&[[1.0, 1.0], [3.5, 1.0], [0.0, 5.0]]).unwrap();
        let lp = m.log_prob(&theta, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(lp[0].is_finite());
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert_eq!(lp[2], f64::NEG_INFINITY);
    }

    #[test]
    fn nan_parameters_are_an_error() {
        let mut m = unbounded_model(2);
        m.flow.params_mut()[0].data_mut()[0] = f64::NAN;
        assert!(m
            .log_prob(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]))
            .is_err());
    }

    #[test]
    fn sampling_is_seeded_and_in_bounds() {
        let spec = FlowSpec {
            squash: Squash::boxed(vec![0.0, 0.5], vec![3.0, 10.0]),
            ..unbounded_model(2).spec
        };
        let m = FlowModel::new(spec, 1);
        let a = m.sample(&[0.3, -0.1], 200, 9).unwrap();
        let b = m.sample(&[0.3, -0.1], 200, 9).unwrap();
        assert_eq!(a, b);
        for i in 0..200 {
            let r = a.row(i);
            assert!((0.0..=3.0).contains(&r[0]) && (0.5..=10.0).contains(&r[1]));
        }
        assert!(m.sample(&[0.3], 5, 0).is_err());
        assert!(m.sample(&[0.3, 0.1], 0, 0).is_err());
    }
}
