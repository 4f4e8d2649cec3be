use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use rope_core::harness::metrics::{default_levels, log_probs};
use rope_core::harness::{
    run_experiment, self_calibration, CredibleLevels, ExperimentConfig, Lpp, SelfCalConfig,
};
use rope_core::npe::{self, load_checkpoint, save_checkpoint, FlowModel, TrainConfig};
use rope_core::ot::{sinkhorn_semibalanced, Coupling, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use rope_core::rope::{
    assemble_posterior, baseline_npe_direct, baseline_prior, finetune_nse, summary_cost,
    tuning_only, CouplingDiagnostics, PosteriorEstimator, SampleBanks,
};
use rope_core::seed;
use rope_core::simulators::simulate_dataset;
use rope_core::{LabeledDataset, Simulator, SplitRole, TaskId};
use serde_json::json;

use crate::{
    summaries, CoupleArgs, EvalArgs, EvalMethod, ExperimentArgs, FinetuneArgs, PriorChoice,
    RoleChoice, SelfcalArgs, SimulateArgs, SummarizeArgs, TrainArgs,
};

fn load_dataset(path: &Path) -> anyhow::Result<LabeledDataset> {
    LabeledDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_flow(path: &Path) -> anyhow::Result<FlowModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_config(spec: &str) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(spec).with_context(|| format!("loading config `{spec}`"))
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let sim = a.task.simulator();
    let prior = match a.prior {
        PriorChoice::Full => sim.prior().clone(),
        PriorChoice::LowerHalf => sim.prior().lower_half(),
    };
    let role = match a.role {
        RoleChoice::Train => SplitRole::Train,
        RoleChoice::Calibration => SplitRole::Calibration,
        RoleChoice::CalibrationVal => SplitRole::CalibrationVal,
        RoleChoice::Test => SplitRole::Test,
    };
    let data = simulate_dataset(&sim, &prior, a.n, a.seed, a.real, role)?;
    data.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

pub fn train_npe(a: TrainArgs) -> anyhow::Result<()> {
    let base = load_config(&a.config)?.train;
    let cfg = TrainConfig {
        seed: a.seed,
        max_steps: a.steps.unwrap_or(base.max_steps),
        ..base
    };
    let sim = a.task.simulator();
    let (model, report) = npe::train_npe(&sim, sim.prior(), &cfg)?;
    save_checkpoint(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({
        "task": a.task.name(),
        "steps": report.train_loss.len(),
        "best_step": report.best_step,
        "best_val_log_prob": report.best_val_log_prob,
        "checkpoint": a.out,
    }))
}

pub fn finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let base = load_flow(&a.checkpoint)?;
    let data = load_dataset(&a.calibration)?;
    let task: TaskId = match a.task {
        Some(t) => t,
        None => data.task.parse().context("dataset task; pass --task")?,
    };
    let n = a.n_calibration.unwrap_or(data.len());
    if n == 0 || n > data.len() {
        bail!("--n-calibration {n} outside 1..={}", data.len());
    }
    let n_val = n / 5;
    let idx: Vec<usize> = (0..n).collect();
    let cal = data.subset(&idx[..n - n_val], SplitRole::Calibration);
    let cal_val = data.subset(&idx[n - n_val..], SplitRole::CalibrationVal);
    let mut cfg = load_config(&a.config)?.finetune;
    cfg.seed = a.seed;
    let (g, report) = finetune_nse(&base, &cal, &cal_val, &task.simulator(), &cfg)?;
    let mut tuned = base;
    tuned.nse = g;
    save_checkpoint(&tuned, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({
        "n_calibration": cal.len(),
        "n_calibration_val": cal_val.len(),
        "initial_val_loss": report.initial_val_loss,
        "best_val_loss": report.best_val_loss,
        "best_step": report.best_step,
        "selected_on": report.selected_on,
        "checkpoint": a.out,
    }))
}

pub fn summarize(a: SummarizeArgs) -> anyhow::Result<()> {
    let flow = load_flow(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    summaries::write(&a.out, &flow.summaries(&data.obs)?)
}

fn solve(
    obs: &rope_core::Tensor,
    sims: &rope_core::Tensor,
    gamma: f64,
    tau: f64,
) -> anyhow::Result<(Coupling, CouplingDiagnostics)> {
    if obs.cols() != sims.cols() {
        bail!(
            "dimension mismatch: observation summaries have {} columns, simulation summaries {}",
            obs.cols(),
            sims.cols()
        );
    }
    let cost = summary_cost(obs, sims)?;
    let coupling = sinkhorn_semibalanced(&cost, gamma, tau, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
    let diag = CouplingDiagnostics::new(&coupling, &cost)?;
    Ok((coupling, diag))
}

pub fn couple(a: CoupleArgs) -> anyhow::Result<()> {
    let (obs, sims) = (summaries::read(&a.obs)?, summaries::read(&a.sim)?);
    let (coupling, diag) = solve(&obs, &sims, a.gamma, a.tau)?;
    if let Some(out) = &a.out {
        coupling
            .save(out)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&serde_json::to_value(diag)?)
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let test = load_dataset(&a.test)?;
    let task: TaskId = test.task.parse().context("test dataset task")?;
    let sim = task.simulator();
    let flow = || -> anyhow::Result<Arc<FlowModel>> {
        let p = a
            .checkpoint
            .as_ref()
            .context("--checkpoint is required for this method")?;
        Ok(Arc::new(load_flow(p)?))
    };
    let tuned = || -> anyhow::Result<FlowModel> {
        let p = a
            .finetuned
            .as_ref()
            .context("--finetuned is required for this method")?;
        load_flow(p)
    };
    let mut diagnostics = None;
    let est: Box<dyn PosteriorEstimator> = match a.method {
        EvalMethod::Prior => Box::new(baseline_prior(sim.prior(), test.len())),
        EvalMethod::Npe => Box::new(baseline_npe_direct(flow()?, &test.obs)?),
        EvalMethod::TuningOnly => Box::new(tuning_only(flow()?, &tuned()?.nse, &test.obs)?),
        EvalMethod::Rope => {
            let h = flow()?;
            let g = match &a.finetuned {
                Some(_) => tuned()?.nse,
                None => h.nse.clone(),
            };
            let sims_path = a
                .simulations
                .as_ref()
                .context("--simulations is required for rope")?;
            let sims = load_dataset(sims_path)?;
            let sim_summaries = h.summaries(&sims.obs)?;
            let coupling = match &a.coupling {
                Some(p) => {
                    let c = Coupling::load(p)
                        .with_context(|| format!("loading coupling {}", p.display()))?;
                    if c.n_obs() != test.len() || c.n_sim() != sims.len() {
                        bail!(
                            "coupling is {}x{}, expected {}x{} (test x simulations)",
                            c.n_obs(),
                            c.n_sim(),
                            test.len(),
                            sims.len()
                        );
                    }
                    c
                }
                None => {
                    let (c, d) = solve(&g.apply(&test.obs)?, &sim_summaries, a.gamma, a.tau)?;
                    diagnostics = Some(d);
                    c
                }
            };
            let banks = SampleBanks::new(
                h,
                sim_summaries,
                a.bank_chunk,
                seed::derive_named(a.seed, "banks"),
            );
            Box::new(assemble_posterior(&coupling, Arc::new(banks))?)
        }
    };
    let lpp = Lpp::from_values(&log_probs(est.as_ref(), &test)?)?;
    let levels = CredibleLevels::collect(
        est.as_ref(),
        &test,
        a.samples,
        seed::derive_named(a.seed, "ranks"),
    )?;
    let coverage = levels.coverage(&default_levels())?;
    print_json(&json!({
        "method": format!("{:?}", a.method).to_lowercase(),
        "task": task.name(),
        "n_test": test.len(),
        "lpp": lpp.mean,
        "lpp_stderr": lpp.stderr,
        "n_neg_inf": lpp.n_neg_inf,
        "acauc": levels.acauc(),
        "coverage_levels": coverage.levels,
        "coverage": coverage.mean,
        "coupling": diagnostics,
    }))
}

pub fn experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.gamma {
        cfg.gammas = g;
    }
    if let Some(t) = a.tau {
        cfg.taus = t;
    }
    if let Some(n) = a.n_calibration {
        cfg.calibration_sizes = n;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    let failed = outcome.errors().count();
    eprintln!(
        "{} cells, {failed} failed; results in {}",
        outcome.reports.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn selfcal(a: SelfcalArgs) -> anyhow::Result<()> {
    let sim = a.task.simulator();
    let flow = match &a.checkpoint {
        Some(p) => load_flow(p)?,
        None => {
            let train = TrainConfig {
                seed: a.seed,
                ..load_config(&a.config)?.train
            };
            npe::train_npe(&sim, sim.prior(), &train)?.0
        }
    };
    let cfg = SelfCalConfig {
        n_obs: a.n_obs,
        gamma: a.gamma,
        tau: a.tau,
        pooled: a.pooled,
        seed: a.seed,
        ..SelfCalConfig::default()
    };
    let r = self_calibration(Arc::new(flow), &sim, &cfg)?;
    for (d, ks) in r.ks.iter().enumerate() {
        println!("ks[{d}] = {ks:.6}");
    }
    println!("column_error = {:.3e}", r.column_error);
    println!("row_error = {:.3e}", r.row_error);
    println!("converged = {} ({} iterations)", r.converged, r.iterations);
    Ok(())
}
