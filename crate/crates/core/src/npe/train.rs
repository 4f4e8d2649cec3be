//! Maximum-likelihood training on freshly simulated batches.

use serde::{Deserialize, Serialize};

use super::{FlowModel, FlowSpec, NpeError, Squash};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::seed;
use crate::simulators::{sample_pairs, BoxPrior, Simulator};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub val_interval: usize,
    pub val_size: usize,
    pub seed: u64,
    pub n_flow_layers: usize,
    pub flow_hidden: Vec<usize>,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 5e-4,
            max_steps: 3000,
            val_interval: 100,
            val_size: 10_000,
            seed: 0,
            n_flow_layers: 5,
            flow_hidden: vec![64, 64],
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NpeError> {
        let bad = |m: &str| Err(NpeError::Config(m.to_string()));
        if self.batch_size == 0
            || self.max_steps == 0
            || self.val_interval == 0
            || self.n_flow_layers == 0
        {
            return bad("batch_size, max_steps, val_interval and n_flow_layers must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be positive");
        }
        if self.val_size < 1000 {
            return bad("val_size must be at least 1000");
        }
        if self.flow_hidden.is_empty() || self.flow_hidden.contains(&0) {
            return bad("flow_hidden needs at least one non-empty layer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub val_log_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean negative log-probability of each training batch.
    pub train_loss: Vec<f64>,
    pub history: Vec<ValidationRecord>,
    pub best_step: usize,
    pub best_val_log_prob: f64,
}

/// Mean `log p̃(θ | h(x))` over a labelled set, evaluated in chunks.
pub fn mean_log_prob(model: &FlowModel, theta: &Tensor, x: &Tensor) -> Result<f64, NpeError> {
    let n = theta.rows();
    if n == 0 {
        return Err(NpeError::Empty("validation set".into()));
    }
    let mut total = 0.0;
    for start in (0..n).step_by(2500) {
        let idx: Vec<usize> = (start..(start + 2500).min(n)).collect();
        let lp = model.log_prob_obs(&theta.select_rows(&idx), &x.select_rows(&idx))?;
        total += lp.iter().sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Adam on `−mean log p̃`, keeping the best validation checkpoint (step 0 included).
///
/// `batch(step)` supplies the `(θ, x)` pairs for each step, `1..=max_steps`.
pub fn train_flow(
    mut model: FlowModel,
    cfg: &TrainConfig,
    train_nse: bool,
    mut batch: impl FnMut(usize) -> Result<(Tensor, Tensor), NpeError>,
    val: (&Tensor, &Tensor),
) -> Result<(FlowModel, TrainReport), NpeError> {
    cfg.validate()?;
    let mut adam = AdamState::new(model.params());
    let mut report = TrainReport::default();
    let validate = |m: &FlowModel, step: usize| -> Result<f64, NpeError> {
        let v = mean_log_prob(m, val.0, val.1)?;
        if v.is_nan() {
            return Err(NpeError::Divergence {
                step,
                detail: "validation log-probability is NaN".into(),
            });
        }
        Ok(v)
    };
    let v0 = validate(&model, 0)?;
    report.history.push(ValidationRecord {
        step: 0,
        val_log_prob: v0,
    });
    report.best_val_log_prob = v0;
    let mut best = model.clone();
    for step in 1..=cfg.max_steps {
        let (theta, x) = batch(step)?;
        let (loss, mut grads) = {
            let tape = Tape::new();
            let bound = model.bind(&tape, train_nse, true);
            let ctx = model.summaries_tape(&tape, &bound, &x)?;
            let loss = model
                .log_prob_tape(&tape, &bound, &theta, ctx)?
                .mean()
                .neg();
            let value = loss.item();
            if !value.is_finite() {
                return Err(NpeError::Divergence {
                    step,
                    detail: format!("training loss {value}"),
                });
            }
            let g = tape.backward(loss)?;
            (value, bound.all().map(|v| g.wrt(v)).collect::<Vec<_>>())
        };
        report.train_loss.push(loss);
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam_step(
            &mut model.params_mut(),
            &grads,
            &mut adam,
            cfg.learning_rate,
        )?;
        if step % cfg.val_interval == 0 || step == cfg.max_steps {
            let v = validate(&model, step)?;
            report.history.push(ValidationRecord {
                step,
                val_log_prob: v,
            });
            if v > report.best_val_log_prob {
                report.best_val_log_prob = v;
                report.best_step = step;
                best = model.clone();
            }
        }
    }
    Ok((best, report))
}

/// Trains a fresh model for `sim` on on-the-fly simulations from `prior`.
///
/// Validation uses `cfg.val_size` fixed pairs; their observations also fix the
/// statistic network's input standardisation.
pub fn train_npe(
    sim: &dyn Simulator,
    prior: &BoxPrior,
    cfg: &TrainConfig,
) -> Result<(FlowModel, TrainReport), NpeError> {
    cfg.validate()?;
    let mut spec = FlowSpec::for_simulator(sim, cfg.n_flow_layers, &cfg.flow_hidden);
    spec.squash = Squash::boxed(prior.lo.clone(), prior.hi.clone());
    let (vt, vx) = sample_pairs(
        sim,
        prior,
        cfg.val_size,
        seed::derive_named(cfg.seed, "validation"),
        false,
    )?;
    let mut model = FlowModel::new(spec, seed::derive_named(cfg.seed, "init"));
    model.nse.fit_standardization(&vx);
    let stream = seed::derive_named(cfg.seed, "batches");
    train_flow(
        model,
        cfg,
        true,
        |step| {
            Ok(sample_pairs(
                sim,
                prior,
                cfg.batch_size,
                seed::derive(stream, step as u64),
                false,
            )?)
        },
        (&vt, &vx),
    )
}
