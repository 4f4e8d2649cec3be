//! End-to-end inference: fine-tune, simulate, couple, mix.
//!
//! [`RopeContext`] holds the parts that do not depend on `(γ, τ)`, so a grid
//! over those reuses one fine-tuned network, one simulation set and one set
//! of sample banks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    assemble_posterior, finetune_nse, summary_cost, FineTuneConfig, FineTuneReport,
    MixturePosterior, RopeError, SampleBanks,
};
use crate::npe::{write_checkpoint, FlowModel, Nse};
use crate::ot::{sinkhorn_semibalanced, Coupling, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::seed;
use crate::simulators::{simulate_batch, LabeledDataset, Provenance, Simulator, SplitRole, Splits};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RopeConfig {
    pub gamma: f64,
    pub tau: f64,
    pub finetune: FineTuneConfig,
    /// Simulation count; `None` matches the number of test observations.
    pub n_sim: Option<usize>,
    /// Samples added to a component bank at a time.
    pub bank_chunk: usize,
    pub seed: u64,
    /// Transport in the frozen summary space (the OT-only ablation).
    pub skip_finetune: bool,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau: 1.0,
            finetune: FineTuneConfig::default(),
            n_sim: None,
            bank_chunk: 256,
            seed: 0,
            skip_finetune: false,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Solver summary kept alongside outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    pub n_obs: usize,
    pub n_sim: usize,
    pub gamma: f64,
    pub tau: f64,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
    pub row_error: f64,
    pub column_error: f64,
    pub entropy: f64,
    pub objective: f64,
}

impl CouplingDiagnostics {
    pub fn new(c: &Coupling, cost: &crate::ot::CostMatrix) -> Result<Self, RopeError> {
        Ok(Self {
            n_obs: c.n_obs(),
            n_sim: c.n_sim(),
            gamma: c.gamma,
            tau: c.tau,
            iterations: c.iterations,
            converged: c.converged,
            marginal_error: c.marginal_error,
            row_error: c.row_error(),
            column_error: c.column_error(),
            entropy: c.entropy(),
            objective: c.objective(cost)?,
        })
    }
}

/// Configuration, seeds and content hashes of everything a run consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub task: String,
    pub config: RopeConfig,
    pub seeds: Vec<(String, u64)>,
    /// `sha256:<hex>` per artifact name.
    pub hashes: Vec<(String, String)>,
    pub finetune: Option<FineTuneReport>,
    pub coupling: CouplingDiagnostics,
}

/// `sha256:<hex>` digest of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

fn dataset_hash(d: &LabeledDataset) -> Result<String, RopeError> {
    let mut buf = Vec::new();
    d.write_to(&mut buf)?;
    Ok(content_hash(&buf))
}

/// Prior-spread θ (Latin hypercube) and their well-specified simulations.
pub fn simulation_set(
    sim: &dyn Simulator,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset, RopeError> {
    let thetas = sim
        .prior()
        .latin_hypercube(n, seed::derive_named(seed, "theta"));
    let obs = simulate_batch(sim, &thetas, seed::derive_named(seed, "obs"), false)?;
    Ok(LabeledDataset::new(
        sim.name(),
        Provenance::Simulated,
        SplitRole::Train,
        seed,
        thetas,
        obs,
    )?)
}

/// Everything upstream of the transport problem for one test set.
#[derive(Debug, Clone)]
pub struct RopeContext {
    pub flow: Arc<FlowModel>,
    /// Fine-tuned statistic network, or a copy of `h` when fine-tuning is skipped.
    pub g: Nse,
    pub finetune: Option<FineTuneReport>,
    pub simulations: LabeledDataset,
    /// `x_o`, `[n_o, d]`
    pub observations: Tensor,
    /// `g(x_o)`, `[n_o, l]`
    pub obs_summaries: Tensor,
    pub banks: Arc<SampleBanks>,
    hashes: Vec<(String, String)>,
    task: String,
    cfg: RopeConfig,
}

impl RopeContext {
    /// Steps 1 to 3: fine-tune `g`, simulate `n_s` observations, cache summaries.
    pub fn prepare(
        flow: Arc<FlowModel>,
        sim: &dyn Simulator,
        splits: &Splits,
        cfg: &RopeConfig,
    ) -> Result<Self, RopeError> {
        if splits.test.is_empty() {
            return Err(RopeError::Empty("test set".into()));
        }
        if cfg.bank_chunk == 0 {
            return Err(RopeError::Config("bank_chunk must be at least 1".into()));
        }
        let n_s = cfg.n_sim.unwrap_or(splits.test.len());
        if n_s == 0 {
            return Err(RopeError::Empty("simulation set".into()));
        }
        let simulations = simulation_set(sim, n_s, seed::derive_named(cfg.seed, "simulations"))?;
        let obs_summaries = flow.summaries(&splits.test.obs)?;
        let sim_summaries = flow.summaries(&simulations.obs)?;
        let banks = Arc::new(SampleBanks::new(
            flow.clone(),
            sim_summaries,
            cfg.bank_chunk,
            seed::derive_named(cfg.seed, "banks"),
        ));
        let mut ck = Vec::new();
        write_checkpoint(&flow, &mut ck)?;
        let hashes = vec![
            ("checkpoint".to_string(), content_hash(&ck)),
            (
                "calibration".to_string(),
                dataset_hash(&splits.calibration)?,
            ),
            (
                "calibration_val".to_string(),
                dataset_hash(&splits.calibration_val)?,
            ),
            ("test".to_string(), dataset_hash(&splits.test)?),
            ("simulations".to_string(), dataset_hash(&simulations)?),
        ];
        let frozen = Self {
            g: flow.nse.clone(),
            flow,
            finetune: None,
            simulations,
            observations: splits.test.obs.clone(),
            obs_summaries,
            banks,
            hashes,
            task: sim.name().to_string(),
            cfg: RopeConfig {
                skip_finetune: true,
                ..cfg.clone()
            },
        };
        if cfg.skip_finetune {
            Ok(frozen)
        } else {
            frozen.refit(sim, &splits.calibration, &splits.calibration_val)
        }
    }

    /// Fine-tunes a fresh copy of `h` on new calibration data, keeping the
    /// simulations and sample banks.
    pub fn refit(
        &self,
        sim: &dyn Simulator,
        calibration: &LabeledDataset,
        calibration_val: &LabeledDataset,
    ) -> Result<Self, RopeError> {
        let ft = FineTuneConfig {
            seed: seed::derive_named(self.cfg.seed, "finetune"),
            ..self.cfg.finetune.clone()
        };
        let (g, report) = finetune_nse(&self.flow, calibration, calibration_val, sim, &ft)?;
        let mut next = self.with_network(g, Some(report))?;
        for (name, hash) in &mut next.hashes {
            match name.as_str() {
                "calibration" => *hash = dataset_hash(calibration)?,
                "calibration_val" => *hash = dataset_hash(calibration_val)?,
                _ => {}
            }
        }
        Ok(next)
    }

    /// The same simulations and banks with the observations summarised by `g`.
    pub fn with_network(
        &self,
        g: Nse,
        finetune: Option<FineTuneReport>,
    ) -> Result<Self, RopeError> {
        let obs_summaries = g.apply(&self.observations)?;
        let cfg = RopeConfig {
            skip_finetune: finetune.is_none(),
            ..self.cfg.clone()
        };
        Ok(Self {
            g,
            finetune,
            obs_summaries,
            cfg,
            ..self.clone()
        })
    }

    /// Steps 4 and 5 for one `(γ, τ)`.
    pub fn posterior(&self, gamma: f64, tau: f64) -> Result<RopeRun, RopeError> {
        let cost = summary_cost(&self.obs_summaries, self.banks.summaries())?;
        let coupling = sinkhorn_semibalanced(&cost, gamma, tau, self.cfg.max_iters, self.cfg.tol)?;
        let diagnostics = CouplingDiagnostics::new(&coupling, &cost)?;
        let posterior = assemble_posterior(&coupling, self.banks.clone())?;
        let cfg = RopeConfig {
            gamma,
            tau,
            ..self.cfg.clone()
        };
        let provenance = ProvenanceRecord {
            task: self.task.clone(),
            seeds: vec![
                ("master".into(), cfg.seed),
                ("finetune".into(), seed::derive_named(cfg.seed, "finetune")),
                (
                    "simulations".into(),
                    seed::derive_named(cfg.seed, "simulations"),
                ),
                ("banks".into(), seed::derive_named(cfg.seed, "banks")),
            ],
            config: cfg,
            hashes: self.hashes.clone(),
            finetune: self.finetune.clone(),
            coupling: diagnostics.clone(),
        };
        Ok(RopeRun {
            posterior,
            coupling,
            diagnostics,
            provenance,
        })
    }
}

/// Output of one full inference run.
#[derive(Debug, Clone)]
pub struct RopeRun {
    pub posterior: MixturePosterior,
    pub coupling: Coupling,
    pub diagnostics: CouplingDiagnostics,
    pub provenance: ProvenanceRecord,
}

/// All five steps with `cfg.gamma` and `cfg.tau`, given a trained model.
pub fn run_rope(
    flow: Arc<FlowModel>,
    sim: &dyn Simulator,
    splits: &Splits,
    cfg: &RopeConfig,
) -> Result<RopeRun, RopeError> {
    RopeContext::prepare(flow, sim, splits, cfg)?.posterior(cfg.gamma, cfg.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npe::FlowSpec;
    use crate::simulators::{make_splits, simulate_dataset, TaskId};

    fn fixture() -> (crate::simulators::Task, Arc<FlowModel>, Splits) {
        let sim = TaskId::Sir.simulator();
        let mut m = FlowModel::new(FlowSpec::for_simulator(&sim, 2, &[8]), 1);
        let (_, x) = crate::simulators::sample_pairs(&sim, sim.prior(), 300, 2, false).unwrap();
        m.nse.fit_standardization(&x);
        let real = simulate_dataset(&sim, sim.prior(), 60, 3, true, SplitRole::Test).unwrap();
        let splits = make_splits(&real, 20, 30, 4).unwrap();
        (sim, Arc::new(m), splits)
    }

    fn quick() -> RopeConfig {
        RopeConfig {
            finetune: FineTuneConfig {
                steps: 20,
                learning_rate: 1e-3,
                ..FineTuneConfig::default()
            },
            bank_chunk: 32,
            ..RopeConfig::default()
        }
    }

    #[test]
    fn balanced_run_is_a_proper_mixture() {
        let (sim, flow, splits) = fixture();
        let run = run_rope(flow, &sim, &splits, &quick()).unwrap();
        assert_eq!(run.posterior.alpha.shape(), &[30, 30]);
        assert!(run.diagnostics.converged);
        assert!(run.diagnostics.column_error < 1e-6);
        for i in 0..30 {
            let s: f64 = run.posterior.weights(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(run
            .provenance
            .hashes
            .iter()
            .all(|(_, h)| h.starts_with("sha256:") && h.len() == 71));
        assert!(run.provenance.finetune.is_some());
    }

    #[test]
    fn runs_are_reproducible() {
        let (sim, flow, splits) = fixture();
        let a = run_rope(flow.clone(), &sim, &splits, &quick()).unwrap();
        let b = run_rope(flow, &sim, &splits, &quick()).unwrap();
        assert_eq!(a.coupling.p, b.coupling.p);
        assert_eq!(a.provenance, b.provenance);
        use super::super::PosteriorEstimator;
        assert_eq!(
            a.posterior.sample(3, 50, 9).unwrap(),
            b.posterior.sample(3, 50, 9).unwrap()
        );
    }

    #[test]
    fn ot_only_uses_the_frozen_network() {
        let (sim, flow, splits) = fixture();
        let cfg = RopeConfig {
            skip_finetune: true,
            ..quick()
        };
        let ctx = RopeContext::prepare(flow.clone(), &sim, &splits, &cfg).unwrap();
        assert_eq!(ctx.g, flow.nse);
        assert!(ctx.finetune.is_none());
        let tuned = RopeContext::prepare(flow.clone(), &sim, &splits, &quick()).unwrap();
        let frozen = tuned.with_network(flow.nse.clone(), None).unwrap();
        assert_eq!(frozen.obs_summaries, ctx.obs_summaries);
        assert_eq!(frozen.simulations, ctx.simulations);
        assert_eq!(
            frozen.posterior(0.5, 1.0).unwrap().coupling.p,
            ctx.posterior(0.5, 1.0).unwrap().coupling.p
        );
    }

    #[test]
    fn huge_gamma_gives_uniform_weights() {
        let (sim, flow, splits) = fixture();
        let ctx = RopeContext::prepare(flow, &sim, &splits, &quick()).unwrap();
        let run = ctx.posterior(1e3, 1.0).unwrap();
        let dev = run
            .posterior
            .alpha
            .data()
            .iter()
            .map(|a| (a - 1.0 / 30.0).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn simulation_count_follows_the_flag() {
        let (sim, flow, splits) = fixture();
        let cfg = RopeConfig {
            n_sim: Some(45),
            ..quick()
        };
        let run = run_rope(flow, &sim, &splits, &cfg).unwrap();
        assert_eq!(run.posterior.alpha.shape(), &[30, 45]);
    }
}
