//! Fine-tuning the statistic network on labelled real observations.
//!
//! The target for each calibration label `θ^i` is the Monte-Carlo mean of the
//! frozen summaries `h(S(θ^i, ε))`, computed once. The copy `g` starts at `h`
//! and is trained by full-batch Adam on `mean_i ‖g(x_o^i) − target_i‖₂`.

use serde::{Deserialize, Serialize};

use super::RopeError;
use crate::npe::{FlowModel, Nse};
use crate::optim::{adam_step, AdamState};
use crate::seed;
use crate::simulators::{simulate_batch, LabeledDataset, Simulator};
use crate::tensor::{Tape, Tensor};

/// Keeps the norm differentiable where a residual is exactly zero.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Simulator draws per calibration label for the target summaries.
    pub mc_samples: usize,
    pub seed: u64,
    /// Steps between validation evaluations.
    pub val_interval: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            steps: 5000,
            mc_samples: 1,
            seed: 0,
            val_interval: 10,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<(), RopeError> {
        if self.steps == 0 || self.mc_samples == 0 || self.val_interval == 0 {
            return Err(RopeError::Config(
                "fine-tuning steps, mc_samples and val_interval must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RopeError::Config(
                "fine-tuning learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub train_loss: Vec<f64>,
    pub val_history: Vec<(usize, f64)>,
    /// `calibration_val`, or `calibration` when the validation share is empty.
    pub selected_on: String,
}

/// Mean frozen summary of `mc` simulations per row of `thetas`.
pub fn mc_targets(
    h: &Nse,
    sim: &dyn Simulator,
    thetas: &Tensor,
    mc: usize,
    seed: u64,
) -> Result<Tensor, RopeError> {
    let (n, l) = (thetas.rows(), h.output_dim());
    let mut acc = vec![0.0; n * l];
    for m in 0..mc {
        let x = simulate_batch(sim, thetas, seed::derive(seed, m as u64), false)?;
        for (a, v) in acc.iter_mut().zip(h.apply(&x)?.data()) {
            *a += v / mc as f64;
        }
    }
    Ok(Tensor::matrix(n, l, acc)?)
}

/// `mean_i ‖g(x_i) − t_i‖₂`, exact.
pub fn summary_loss(g: &Nse, x: &Tensor, targets: &Tensor) -> Result<f64, RopeError> {
    let n = x.rows();
    if n == 0 {
        return Err(RopeError::Empty("summary loss of an empty set".into()));
    }
    let s = g.apply(x)?;
    let total: f64 = (0..n)
        .map(|i| {
            s.row(i)
                .iter()
                .zip(targets.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Fine-tunes a copy of `base.nse`; returns the checkpoint with the lowest
/// validation loss, initialisation included.
pub fn finetune_nse(
    base: &FlowModel,
    calibration: &LabeledDataset,
    calibration_val: &LabeledDataset,
    sim: &dyn Simulator,
    cfg: &FineTuneConfig,
) -> Result<(Nse, FineTuneReport), RopeError> {
    cfg.validate()?;
    if calibration.is_empty() {
        return Err(RopeError::Empty("calibration set".into()));
    }
    let h = &base.nse;
    let targets = mc_targets(
        h,
        sim,
        &calibration.thetas,
        cfg.mc_samples,
        seed::derive_named(cfg.seed, "targets"),
    )?;
    let (val_x, val_t, selected_on) = if calibration_val.is_empty() {
        (calibration.obs.clone(), targets.clone(), "calibration")
    } else {
        let t = mc_targets(
            h,
            sim,
            &calibration_val.thetas,
            cfg.mc_samples,
            seed::derive_named(cfg.seed, "val-targets"),
        )?;
        (calibration_val.obs.clone(), t, "calibration_val")
    };
    let mut g = h.clone();
    let mut adam = AdamState::new(g.mlp.params());
    let initial = summary_loss(&g, &val_x, &val_t)?;
    let mut report = FineTuneReport {
        initial_val_loss: initial,
        best_val_loss: initial,
        best_step: 0,
        train_loss: Vec::with_capacity(cfg.steps),
        val_history: vec![(0, initial)],
        selected_on: selected_on.into(),
    };
    let mut best = g.clone();
    for step in 1..=cfg.steps {
        let (loss, grads) = {
            let tape = Tape::new();
            let vars = g.mlp.bind(&tape, true);
            let out = g.forward(&tape, &vars, &calibration.obs)?;
            let diff = out.sub(tape.constant(&targets))?;
            let eps = tape.constant_owned(Tensor::scalar(NORM_EPS));
            let loss = diff.square().sum_last()?.add(eps)?.sqrt()?.mean();
            let grads = tape.backward(loss)?;
            (
                loss.item(),
                vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>(),
            )
        };
        report.train_loss.push(loss);
        adam_step(
            &mut g.mlp.params_mut(),
            &grads,
            &mut adam,
            cfg.learning_rate,
        )?;
        if step % cfg.val_interval == 0 || step == cfg.steps {
            let v = summary_loss(&g, &val_x, &val_t)?;
            report.val_history.push((step, v));
            if v < report.best_val_loss {
                report.best_val_loss = v;
                report.best_step = step;
                best = g.clone();
            }
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npe::FlowSpec;
    use crate::simulators::{simulate_dataset, SplitRole, TaskId};

    fn setup() -> (crate::simulators::Task, FlowModel) {
        let sim = TaskId::Sir.simulator();
        let mut m = FlowModel::new(FlowSpec::for_simulator(&sim, 2, &[8]), 3);
        let (_, x) = crate::simulators::sample_pairs(&sim, sim.prior(), 500, 1, false).unwrap();
        m.nse.fit_standardization(&x);
        (sim, m)
    }

    #[test]
    fn lookup_table_has_zero_loss() {
        let (sim, m) = setup();
        let d = simulate_dataset(&sim, sim.prior(), 10, 2, false, SplitRole::Calibration).unwrap();
        let t = m.nse.apply(&d.obs).unwrap();
        assert_eq!(summary_loss(&m.nse, &d.obs, &t).unwrap(), 0.0);
    }

    #[test]
    fn returned_checkpoint_never_worse_than_init() {
        let (sim, m) = setup();
        let cal = simulate_dataset(&sim, sim.prior(), 16, 5, true, SplitRole::Calibration).unwrap();
        let val =
            simulate_dataset(&sim, sim.prior(), 4, 6, true, SplitRole::CalibrationVal).unwrap();
        let cfg = FineTuneConfig {
            learning_rate: 3e-3,
            steps: 60,
            val_interval: 5,
            ..FineTuneConfig::default()
        };
        let (g, rep) = finetune_nse(&m, &cal, &val, &sim, &cfg).unwrap();
        assert!(rep.best_val_loss <= rep.initial_val_loss);
        let t = mc_targets(
            &m.nse,
            &sim,
            &val.thetas,
            1,
            seed::derive_named(0, "val-targets"),
        )
        .unwrap();
        assert_eq!(summary_loss(&g, &val.obs, &t).unwrap(), rep.best_val_loss);
        assert!(
            rep.train_loss.last().unwrap() < &rep.train_loss[0],
            "{:?}",
            rep.train_loss
        );
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let (sim, m) = setup();
        let cal = simulate_dataset(&sim, sim.prior(), 0, 5, true, SplitRole::Calibration).unwrap();
        assert!(matches!(
            finetune_nse(&m, &cal, &cal, &sim, &FineTuneConfig::default()),
            Err(RopeError::Empty(_))
        ));
    }
}
