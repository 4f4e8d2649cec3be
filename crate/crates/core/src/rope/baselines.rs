//! Reference estimators sharing the [`PosteriorEstimator`] interface.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_index, FlowPosterior, PosteriorEstimator, PriorPosterior, RopeError};
use crate::npe::{mean_log_prob, train_flow, FlowModel, Nse, TrainConfig, TrainReport};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::seed;
use crate::simulators::{sample_pairs, simulate_batch, BoxPrior, LabeledDataset, Simulator};
use crate::tensor::{Tape, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Soft bound on the predicted log-variance.
const LOG_VAR_BOUND: f64 = 12.0;

/// The prior for every observation.
pub fn baseline_prior(prior: &BoxPrior, n_obs: usize) -> PriorPosterior {
    PriorPosterior {
        prior: prior.clone(),
        n_obs,
    }
}

/// The simulation-trained flow applied to real observations as is.
pub fn baseline_npe_direct(flow: Arc<FlowModel>, obs: &Tensor) -> Result<FlowPosterior, RopeError> {
    FlowPosterior::from_observations(flow, obs)
}

/// The flow conditioned on fine-tuned summaries `g(x_o)`, no transport.
pub fn tuning_only(
    flow: Arc<FlowModel>,
    g: &Nse,
    obs: &Tensor,
) -> Result<FlowPosterior, RopeError> {
    let summaries = g.apply(obs)?;
    Ok(FlowPosterior { flow, summaries })
}

/// The flow on synthetic twins `x_s^i ~ S(θ^i)` of the test labels.
pub fn sbi_reference(
    flow: Arc<FlowModel>,
    sim: &dyn Simulator,
    thetas: &Tensor,
    seed: u64,
) -> Result<FlowPosterior, RopeError> {
    let x = simulate_batch(sim, thetas, seed, false)?;
    FlowPosterior::from_observations(flow, &x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JnpeConfig {
    /// Half simulated, half calibration pairs.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub val_interval: usize,
    pub seed: u64,
}

impl Default for JnpeConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 1e-4,
            steps: 500,
            val_interval: 25,
            seed: 0,
        }
    }
}

/// Rows of a mixed batch: `batch / 2` calibration pairs drawn with
/// replacement, the rest freshly simulated.
pub fn jnpe_batch(
    sim: &dyn Simulator,
    prior: &BoxPrior,
    calibration: &LabeledDataset,
    batch_size: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, usize), RopeError> {
    use rand::Rng as _;
    let n_real = batch_size / 2;
    let (st, sx) = sample_pairs(
        sim,
        prior,
        batch_size - n_real,
        seed::derive_named(seed, "sim"),
        false,
    )?;
    let mut rng = seed::rng(seed::derive_named(seed, "real"));
    let idx: Vec<usize> = (0..n_real)
        .map(|_| rng.random_range(0..calibration.len()))
        .collect();
    let rt = calibration.thetas.select_rows(&idx);
    let rx = calibration.obs.select_rows(&idx);
    let stack = |a: &Tensor, b: &Tensor| {
        Tensor::matrix(a.rows() + b.rows(), a.cols(), [a.data(), b.data()].concat())
    };
    Ok((stack(&rt, &st)?, stack(&rx, &sx)?, n_real))
}

/// Continues training `base` on pooled simulated and calibration pairs,
/// selecting on `calibration_val` (on `calibration` when that is empty).
pub fn baseline_jnpe(
    base: &FlowModel,
    sim: &dyn Simulator,
    prior: &BoxPrior,
    calibration: &LabeledDataset,
    calibration_val: &LabeledDataset,
    cfg: &JnpeConfig,
) -> Result<(FlowModel, TrainReport), RopeError> {
    if calibration.is_empty() {
        return Err(RopeError::Empty("J-NPE needs calibration pairs".into()));
    }
    if cfg.batch_size < 2 {
        return Err(RopeError::Config(
            "J-NPE batch_size must be at least 2".into(),
        ));
    }
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        max_steps: cfg.steps,
        val_interval: cfg.val_interval,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let val = if calibration_val.is_empty() {
        calibration
    } else {
        calibration_val
    };
    let stream = seed::derive_named(cfg.seed, "jnpe-batches");
    Ok(train_flow(
        base.clone(),
        &tc,
        true,
        |step| {
            let (t, x, _) = jnpe_batch(
                sim,
                prior,
                calibration,
                cfg.batch_size,
                seed::derive(stream, step as u64),
            )
            .map_err(|e| match e {
                RopeError::Npe(e) => e,
                RopeError::Sim(e) => e.into(),
                RopeError::Tensor(e) => e.into(),
                other => crate::npe::NpeError::Config(other.to_string()),
            })?;
            Ok((t, x))
        },
        (&val.thetas, &val.obs),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub val_interval: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            steps: 2000,
            val_interval: 10,
            seed: 0,
        }
    }
}

/// Diagonal Gaussian per observation, in box-normalised coordinates
/// `u = (θ − mid) / width`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub net: Nse,
    pub prior: BoxPrior,
    /// `[n, k]`, normalised coordinates.
    pub mean: Tensor,
    /// `[n, k]`
    pub log_var: Tensor,
}

impl GaussianPosterior {
    /// Evaluates `net` on `obs`.
    pub fn new(net: Nse, prior: BoxPrior, obs: &Tensor) -> Result<Self, RopeError> {
        let out = net.apply(obs)?;
        let k = prior.dim();
        let (n, mut mean, mut lv) = (out.rows(), Vec::new(), Vec::new());
        for i in 0..n {
            let r = out.row(i);
            mean.extend_from_slice(&r[..k]);
            lv.extend(
                r[k..]
                    .iter()
                    .map(|&v| LOG_VAR_BOUND * (v / LOG_VAR_BOUND).tanh()),
            );
        }
        Ok(Self {
            net,
            mean: Tensor::matrix(n, k, mean)?,
            log_var: Tensor::matrix(n, k, lv)?,
            prior,
        })
    }

    fn width(&self, d: usize) -> f64 {
        self.prior.hi[d] - self.prior.lo[d]
    }

    fn mid(&self, d: usize) -> f64 {
        0.5 * (self.prior.hi[d] + self.prior.lo[d])
    }
}

impl PosteriorEstimator for GaussianPosterior {
    fn n_obs(&self) -> usize {
        self.mean.rows()
    }

    fn theta_dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError> {
        check_index(i, self.n_obs())?;
        Ok((0..self.theta_dim())
            .map(|d| {
                let u = (theta[d] - self.mid(d)) / self.width(d);
                let (m, lv) = (self.mean.get(i, d), self.log_var.get(i, d));
                -0.5 * (LN_2PI + lv + (u - m).powi(2) * (-lv).exp()) - self.width(d).ln()
            })
            .sum())
    }

    fn sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError> {
        check_index(i, self.n_obs())?;
        let k = self.theta_dim();
        let mut rng = seed::rng(seed);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            for d in 0..k {
                let e: f64 = StandardNormal.sample(&mut rng);
                let u = self.mean.get(i, d) + (0.5 * self.log_var.get(i, d)).exp() * e;
                out.push(self.mid(d) + self.width(d) * u);
            }
        }
        Ok(Tensor::matrix(n, k, out)?)
    }
}

fn normalise(prior: &BoxPrior, thetas: &Tensor) -> Result<Tensor, RopeError> {
    let k = prior.dim();
    let data = thetas
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let d = i % k;
            (t - 0.5 * (prior.lo[d] + prior.hi[d])) / (prior.hi[d] - prior.lo[d])
        })
        .collect();
    Ok(Tensor::matrix(thetas.rows(), k, data)?)
}

/// Mean Gaussian negative log-likelihood in normalised coordinates, exact.
fn mlp_nll(net: &Nse, x: &Tensor, u: &Tensor) -> Result<f64, RopeError> {
    let out = net.apply(x)?;
    let k = u.cols();
    let mut total = 0.0;
    for i in 0..u.rows() {
        let r = out.row(i);
        for d in 0..k {
            let lv = LOG_VAR_BOUND * (r[k + d] / LOG_VAR_BOUND).tanh();
            total += 0.5 * (LN_2PI + lv + (u.get(i, d) - r[d]).powi(2) * (-lv).exp());
        }
    }
    Ok(total / u.rows() as f64)
}

/// Fits a statistic-shaped network predicting a diagonal Gaussian by
/// maximum likelihood on the calibration pairs; best validation checkpoint.
pub fn baseline_mlp(
    prior: &BoxPrior,
    calibration: &LabeledDataset,
    calibration_val: &LabeledDataset,
    cfg: &MlpConfig,
) -> Result<Nse, RopeError> {
    if calibration.is_empty() {
        return Err(RopeError::Empty(
            "MLP baseline needs calibration pairs".into(),
        ));
    }
    if calibration_val.is_empty() {
        return Err(RopeError::Empty(
            "MLP baseline needs a non-empty calibration-validation split".into(),
        ));
    }
    if cfg.steps == 0 || cfg.val_interval == 0 || !(cfg.learning_rate > 0.0) {
        return Err(RopeError::Config(
            "MLP steps, val_interval and learning_rate must be positive".into(),
        ));
    }
    let k = prior.dim();
    let mut net = Nse::new(
        calibration.obs_dim(),
        &cfg.hidden,
        2 * k,
        &mut seed::rng(seed::derive_named(cfg.seed, "mlp-init")),
    );
    net.fit_standardization(&calibration.obs);
    let u = normalise(prior, &calibration.thetas)?;
    let uv = normalise(prior, &calibration_val.thetas)?;
    let mut adam = AdamState::new(net.mlp.params());
    let mut best = net.clone();
    let mut best_val = mlp_nll(&net, &calibration_val.obs, &uv)?;
    for step in 1..=cfg.steps {
        let mut grads = {
            let tape = Tape::new();
            let vars = net.mlp.bind(&tape, true);
            let out = net.forward(&tape, &vars, &calibration.obs)?;
            let m = out.slice(0, k)?;
            let lv = out
                .slice(k, 2 * k)?
                .scale(1.0 / LOG_VAR_BOUND)
                .tanh()
                .scale(LOG_VAR_BOUND);
            let r2 = m.sub(tape.constant(&u))?.square();
            let nll = lv
                .add(r2.mul(lv.neg().exp()?)?)?
                .scale(0.5)
                .sum_last()?
                .mean();
            let g = tape.backward(nll)?;
            vars.iter().map(|v| g.wrt(*v)).collect::<Vec<_>>()
        };
        clip_global_norm(&mut grads, 10.0);
        adam_step(
            &mut net.mlp.params_mut(),
            &grads,
            &mut adam,
            cfg.learning_rate,
        )?;
        if step % cfg.val_interval == 0 || step == cfg.steps {
            let v = mlp_nll(&net, &calibration_val.obs, &uv)?;
            if v < best_val {
                best_val = v;
                best = net.clone();
            }
        }
    }
    Ok(best)
}

/// Mean `log p̃(θ | x)` of a flow over a labelled set.
pub fn flow_lpp(flow: &FlowModel, data: &LabeledDataset) -> Result<f64, RopeError> {
    Ok(mean_log_prob(flow, &data.thetas, &data.obs)?)
}
