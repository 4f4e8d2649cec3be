//! Factorial experiment grids and their on-disk reports.
//!
//! Every repetition draws one pool of real pairs. Its first `n_test` rows are
//! the test set and the next `n_calibration` rows the calibration block, so
//! calibration sets are nested across sizes and the test set is shared. The
//! simulation set and sample banks are shared within a repetition too.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, RealPrior};
use super::metrics::{CoverageCurve, CredibleLevels, Lpp};
use super::HarnessError;
use crate::npe::{load_checkpoint, save_checkpoint, train_npe, FlowModel, TrainConfig};
use crate::rope::{
    baseline_jnpe, baseline_mlp, baseline_npe_direct, baseline_prior, content_hash, sbi_reference,
    tuning_only, FlowPosterior, GaussianPosterior, JnpeConfig, MlpConfig, PosteriorEstimator,
    ProvenanceRecord, RopeConfig, RopeContext,
};
use crate::seed;
use crate::simulators::{
    simulate_dataset, LabeledDataset, Simulator, SplitRole, Splits, Task, TaskId,
};

pub const RESULTS_HEADER: &str =
    "method,task,n_calibration,gamma,tau,repetition,lpp,lpp_stderr,n_neg_inf,acauc,wall_clock_s,seed";

/// Coordinates of one cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub n_calibration: usize,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub repetition: usize,
    pub seed: u64,
}

impl CellKey {
    fn label(&self) -> String {
        let mut s = format!("{}_n{}", self.method, self.n_calibration);
        if let (Some(g), Some(t)) = (self.gamma, self.tau) {
            let _ = write!(s, "_g{g}_t{t}");
        }
        let _ = write!(s, "_rep{}", self.repetition);
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Scores of one cell; failed cells carry NaN metrics and the error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub key: CellKey,
    pub task: TaskId,
    pub lpp: Lpp,
    pub acauc: f64,
    pub coverage: Option<CoverageCurve>,
    pub wall_clock_s: Option<f64>,
    pub error: Option<String>,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let k = &self.key;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            k.method,
            self.task,
            k.n_calibration,
            opt(k.gamma),
            opt(k.tau),
            k.repetition,
            self.lpp.mean,
            self.lpp.stderr,
            self.lpp.n_neg_inf,
            self.acauc,
            opt(self.wall_clock_s),
            k.seed
        )
    }
}

/// Posterior draws for one test observation, with its true parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerDump {
    pub file_name: String,
    pub theta_true: Vec<f64>,
    /// `[m, k]`
    pub samples: crate::tensor::Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    /// Grid order: repetition, calibration size, method, `γ`, `τ`.
    pub reports: Vec<MetricsReport>,
    pub corners: Vec<CornerDump>,
    pub provenance: Vec<(String, ProvenanceRecord)>,
    /// Seconds per cell, including failures.
    pub timings: Vec<(CellKey, f64)>,
}

impl ExperimentOutcome {
    pub fn results_table(&self) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for r in &self.reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn errors(&self) -> impl Iterator<Item = (&CellKey, &str)> {
        self.reports
            .iter()
            .filter_map(|r| r.error.as_deref().map(|e| (&r.key, e)))
    }

    /// First report matching the method and calibration size.
    pub fn find(
        &self,
        method: Method,
        n_calibration: usize,
        repetition: usize,
    ) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| {
            r.key.method == method
                && r.key.n_calibration == n_calibration
                && r.key.repetition == repetition
        })
    }
}

/// Real pairs for one repetition: `max(calibration_sizes) + n_test` rows.
pub fn real_pool(
    cfg: &ExperimentConfig,
    sim: &Task,
    rep_seed: u64,
) -> Result<LabeledDataset, HarnessError> {
    let prior = match cfg.real_prior {
        RealPrior::Full => sim.prior().clone(),
        RealPrior::LowerHalf => sim.prior().lower_half(),
    };
    let n = cfg.n_test + cfg.calibration_sizes.iter().copied().max().unwrap_or(0);
    Ok(simulate_dataset(
        sim,
        &prior,
        n,
        seed::derive_named(rep_seed, "real"),
        true,
        SplitRole::Test,
    )?)
}

fn nested_splits(pool: &LabeledDataset, n_test: usize, n_cal: usize) -> Splits {
    let n_val = n_cal / 5;
    let idx = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
    Splits {
        test: pool.subset(&idx(0..n_test), SplitRole::Test),
        calibration: pool.subset(&idx(n_test..n_test + n_cal - n_val), SplitRole::Calibration),
        calibration_val: pool.subset(
            &idx(n_test + n_cal - n_val..n_test + n_cal),
            SplitRole::CalibrationVal,
        ),
    }
}

fn cache_path(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
) -> Result<Option<std::path::PathBuf>, HarnessError> {
    let Some(dir) = &cfg.npe_cache else {
        return Ok(None);
    };
    let text = toml::to_string(train).map_err(|e| HarnessError::Config(e.to_string()))?;
    let hash = content_hash(format!("{}\n{text}", cfg.task).as_bytes());
    Ok(Some(dir.join(format!(
        "npe-{}-{}.json",
        cfg.task,
        &hash[7..23]
    ))))
}

/// One trained estimator per repetition, loaded from `npe_cache` when present.
pub fn train_models(cfg: &ExperimentConfig) -> Result<Vec<Arc<FlowModel>>, HarnessError> {
    cfg.validate()?;
    let sim = cfg.task.simulator();
    (0..cfg.repetitions)
        .map(|rep| {
            let train = TrainConfig {
                seed: seed::derive_named(seed::derive(cfg.seed, rep as u64), "npe"),
                ..cfg.train.clone()
            };
            let path = cache_path(cfg, &train)?;
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                return Ok(Arc::new(load_checkpoint(p)?));
            }
            let (model, _) = train_npe(&sim, sim.prior(), &train)?;
            if let Some(p) = path {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir)?;
                }
                save_checkpoint(&model, p)?;
            }
            Ok(Arc::new(model))
        })
        .collect()
}

#[derive(Clone)]
struct Scored {
    lpp: Lpp,
    acauc: f64,
    coverage: CoverageCurve,
    corners: Vec<CornerDump>,
}

fn score(
    est: &dyn PosteriorEstimator,
    test: &LabeledDataset,
    cfg: &ExperimentConfig,
    cell_seed: u64,
    corner_idx: &[usize],
    label: &str,
) -> Result<Scored, HarnessError> {
    let lpp = super::metrics::compute_lpp(est, test)?;
    let levels = CredibleLevels::collect(
        est,
        test,
        cfg.calibration_samples,
        seed::derive_named(cell_seed, "ranks"),
    )?;
    let corners = corner_idx
        .iter()
        .map(|&i| {
            Ok(CornerDump {
                file_name: format!("{label}_obs{i}.csv"),
                theta_true: test.thetas.row(i).to_vec(),
                samples: est.sample(
                    i,
                    cfg.corner_samples,
                    seed::derive(seed::derive_named(cell_seed, "corner"), i as u64),
                )?,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(Scored {
        lpp,
        acauc: levels.acauc(),
        coverage: levels.coverage(&cfg.coverage_levels)?,
        corners,
    })
}

/// Transport settings swept for a method.
fn transport_grid(cfg: &ExperimentConfig, m: Method) -> Vec<(Option<f64>, Option<f64>)> {
    match m {
        Method::Rope | Method::OtOnly => cfg
            .gammas
            .iter()
            .flat_map(|&g| cfg.taus.iter().map(move |&t| (Some(g), Some(t))))
            .collect(),
        Method::RopeStar => cfg
            .gammas
            .iter()
            .map(|&g| (Some(g), Some(cfg.tau_star)))
            .collect(),
        _ => vec![(None, None)],
    }
}

/// Shared per-repetition state for the transport methods.
struct RepState {
    frozen: Option<Result<RopeContext, String>>,
    tuned: HashMap<usize, Result<RopeContext, String>>,
    fixed: HashMap<(Method, u64), (CellResult, f64)>,
}

/// Runs the grid on pre-trained estimators (one per repetition); no files are written.
pub fn run_grid(
    cfg: &ExperimentConfig,
    models: &[Arc<FlowModel>],
) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate()?;
    if models.len() < cfg.repetitions {
        return Err(HarnessError::Config(format!(
            "{} trained estimators for {} repetitions",
            models.len(),
            cfg.repetitions
        )));
    }
    let sim = cfg.task.simulator();
    let mut out = ExperimentOutcome::default();
    for (rep, flow) in models.iter().enumerate().take(cfg.repetitions) {
        let rep_seed = seed::derive(cfg.seed, rep as u64);
        let pool = real_pool(cfg, &sim, rep_seed)?;
        let corner_idx: Vec<usize> = if rep == 0 {
            let mut v = index::sample(
                &mut seed::rng(seed::derive_named(rep_seed, "corner-obs")),
                cfg.n_test,
                cfg.corner_observations,
            )
            .into_vec();
            v.sort_unstable();
            v
        } else {
            Vec::new()
        };
        let rope_cfg = RopeConfig {
            finetune: cfg.finetune.clone(),
            n_sim: Some(cfg.n_test * cfg.sim_ratio),
            bank_chunk: cfg.bank_chunk,
            seed: seed::derive_named(rep_seed, "rope"),
            skip_finetune: true,
            ..RopeConfig::default()
        };
        let mut state = RepState {
            frozen: None,
            tuned: HashMap::new(),
            fixed: HashMap::new(),
        };
        for &n_cal in &cfg.calibration_sizes {
            let splits = nested_splits(&pool, cfg.n_test, n_cal);
            for &method in &cfg.methods {
                for (gamma, tau) in transport_grid(cfg, method) {
                    let cell_seed = if method.uses_calibration() {
                        seed::derive_named(
                            rep_seed,
                            &format!("cell/{method}/{n_cal}/{}/{}", opt(gamma), opt(tau)),
                        )
                    } else {
                        seed::derive_named(
                            rep_seed,
                            &format!("cell/{method}/{}/{}", opt(gamma), opt(tau)),
                        )
                    };
                    let key = CellKey {
                        method,
                        n_calibration: n_cal,
                        gamma,
                        tau,
                        repetition: rep,
                        seed: cell_seed,
                    };
                    let started = Instant::now();
                    let (result, seconds) =
                        if !method.uses_calibration() && !method.uses_transport() {
                            // Same posterior for every calibration size: score once per repetition.
                            let key_fixed = (method, cell_seed);
                            if !state.fixed.contains_key(&key_fixed) {
                                let label = format!("{method}_rep{rep}");
                                let r = run_cell(
                                    cfg,
                                    &sim,
                                    flow,
                                    &splits,
                                    &rope_cfg,
                                    &mut state,
                                    &key,
                                    &corner_idx,
                                    &label,
                                );
                                state
                                    .fixed
                                    .insert(key_fixed, (r, started.elapsed().as_secs_f64()));
                                let (r, s) = &state.fixed[&key_fixed];
                                (clone_scored(r, true), *s)
                            } else {
                                let (r, s) = &state.fixed[&key_fixed];
                                (clone_scored(r, false), *s)
                            }
                        } else {
                            let r = run_cell(
                                cfg,
                                &sim,
                                flow,
                                &splits,
                                &rope_cfg,
                                &mut state,
                                &key,
                                &corner_idx,
                                &key.label(),
                            );
                            (r, started.elapsed().as_secs_f64())
                        };
                    out.timings.push((key.clone(), seconds));
                    let wall = cfg.record_wall_clock.then_some(seconds);
                    match result {
                        Ok((scored, prov)) => {
                            out.corners.extend(scored.corners);
                            if let Some(p) = prov {
                                out.provenance.push((format!("{}.json", key.label()), p));
                            }
                            out.reports.push(MetricsReport {
                                key,
                                task: cfg.task,
                                lpp: scored.lpp,
                                acauc: scored.acauc,
                                coverage: Some(scored.coverage),
                                wall_clock_s: wall,
                                error: None,
                            });
                        }
                        Err(e) => out.reports.push(MetricsReport {
                            key,
                            task: cfg.task,
                            lpp: Lpp {
                                mean: f64::NAN,
                                stderr: f64::NAN,
                                n_neg_inf: 0,
                                n: 0,
                            },
                            acauc: f64::NAN,
                            coverage: None,
                            wall_clock_s: wall,
                            error: Some(e),
                        }),
                    }
                }
            }
        }
    }
    Ok(out)
}

type CellResult = Result<(Scored, Option<ProvenanceRecord>), String>;

fn clone_scored(r: &CellResult, with_corners: bool) -> CellResult {
    let mut r = r.clone();
    if let Ok((s, _)) = &mut r {
        if !with_corners {
            s.corners.clear();
        }
    }
    r
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    sim: &Task,
    flow: &Arc<FlowModel>,
    splits: &Splits,
    rope_cfg: &RopeConfig,
    state: &mut RepState,
    key: &CellKey,
    corner_idx: &[usize],
    label: &str,
) -> CellResult {
    let prior = sim.prior();
    let test = &splits.test;
    let seed = key.seed;
    let mut provenance = None;
    let est: Box<dyn PosteriorEstimator> = match key.method {
        Method::Prior => Box::new(baseline_prior(prior, test.len())),
        Method::SbiRef => Box::new(
            sbi_reference(
                flow.clone(),
                sim,
                &test.thetas,
                seed::derive_named(seed, "sbi"),
            )
            .map_err(|e| e.to_string())?,
        ),
        Method::Npe => {
            Box::new(baseline_npe_direct(flow.clone(), &test.obs).map_err(|e| e.to_string())?)
        }
        Method::Jnpe => {
            let jc = JnpeConfig {
                seed: seed::derive_named(seed, "jnpe"),
                ..cfg.jnpe.clone()
            };
            let (m, _) = baseline_jnpe(
                flow,
                sim,
                prior,
                &splits.calibration,
                &splits.calibration_val,
                &jc,
            )
            .map_err(|e| e.to_string())?;
            Box::new(
                FlowPosterior::from_observations(Arc::new(m), &test.obs)
                    .map_err(|e| e.to_string())?,
            )
        }
        Method::Mlp => {
            let mc = MlpConfig {
                seed: seed::derive_named(seed, "mlp"),
                ..cfg.mlp.clone()
            };
            let net = baseline_mlp(prior, &splits.calibration, &splits.calibration_val, &mc)
                .map_err(|e| e.to_string())?;
            Box::new(
                GaussianPosterior::new(net, prior.clone(), &test.obs).map_err(|e| e.to_string())?,
            )
        }
        Method::Rope | Method::RopeStar | Method::OtOnly | Method::TuningOnly => {
            let frozen = state
                .frozen
                .get_or_insert_with(|| {
                    let test_only = Splits {
                        calibration: test.subset(&[], SplitRole::Calibration),
                        calibration_val: test.subset(&[], SplitRole::CalibrationVal),
                        test: test.clone(),
                    };
                    RopeContext::prepare(flow.clone(), sim, &test_only, rope_cfg)
                        .map_err(|e| e.to_string())
                })
                .clone()?;
            let ctx = if key.method == Method::OtOnly {
                frozen
            } else {
                state
                    .tuned
                    .entry(key.n_calibration)
                    .or_insert_with(|| {
                        frozen
                            .refit(sim, &splits.calibration, &splits.calibration_val)
                            .map_err(|e| e.to_string())
                    })
                    .clone()?
            };
            if key.method == Method::TuningOnly {
                Box::new(tuning_only(flow.clone(), &ctx.g, &test.obs).map_err(|e| e.to_string())?)
            } else {
                let run = ctx
                    .posterior(key.gamma.unwrap_or(0.5), key.tau.unwrap_or(1.0))
                    .map_err(|e| e.to_string())?;
                provenance = Some(run.provenance);
                Box::new(run.posterior)
            }
        }
    };
    let scored =
        score(est.as_ref(), test, cfg, seed, corner_idx, label).map_err(|e| e.to_string())?;
    Ok((scored, provenance))
}

fn write_csv_f64(v: f64) -> String {
    v.to_string()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    let n = f.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = f.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Repetition mean and standard deviation of one metric per method, `γ`, `τ` and calibration size.
fn aggregate(outcome: &ExperimentOutcome, metric: impl Fn(&MetricsReport) -> f64) -> String {
    let mut groups: Vec<(&CellKey, Vec<f64>)> = Vec::new();
    for r in &outcome.reports {
        let k = &r.key;
        match groups.iter_mut().find(|(g, _)| {
            g.method == k.method
                && g.n_calibration == k.n_calibration
                && g.gamma == k.gamma
                && g.tau == k.tau
        }) {
            Some((_, v)) => v.push(metric(r)),
            None => groups.push((k, vec![metric(r)])),
        }
    }
    let mut s = String::from("method,gamma,tau,n_calibration,mean,std,n_reps\n");
    for (k, v) in groups {
        let (m, sd) = mean_std(&v);
        let n = v.iter().filter(|x| x.is_finite()).count();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            k.method,
            opt(k.gamma),
            opt(k.tau),
            k.n_calibration,
            write_csv_f64(m),
            write_csv_f64(sd),
            n
        );
    }
    s
}

/// Writes the results table, plot data, corner dumps, provenance records,
/// error log, timings and the resolved configuration under `out`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    out: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out.join("corner"))?;
    fs::create_dir_all(out.join("provenance"))?;
    fs::write(out.join("results.csv"), outcome.results_table())?;
    fs::write(
        out.join("lpp_vs_ncal.csv"),
        aggregate(outcome, |r| r.lpp.mean),
    )?;
    fs::write(
        out.join("acauc_vs_ncal.csv"),
        aggregate(outcome, |r| r.acauc),
    )?;

    let mut cov =
        String::from("method,n_calibration,gamma,tau,repetition,dimension,level,coverage\n");
    for r in &outcome.reports {
        let Some(c) = &r.coverage else { continue };
        let k = &r.key;
        let prefix = format!(
            "{},{},{},{},{}",
            k.method,
            k.n_calibration,
            opt(k.gamma),
            opt(k.tau),
            k.repetition
        );
        for (j, a) in c.levels.iter().enumerate() {
            let _ = writeln!(cov, "{prefix},mean,{a},{}", c.mean[j]);
            for (d, per) in c.per_dim.iter().enumerate() {
                let _ = writeln!(cov, "{prefix},{d},{a},{}", per[j]);
            }
        }
    }
    fs::write(out.join("coverage.csv"), cov)?;

    for c in &outcome.corners {
        let k = c.theta_true.len();
        let mut s = format!(
            "# theta_true = {}\n",
            c.theta_true
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        s.push_str(
            &(0..k)
                .map(|d| format!("theta_{d}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
        for i in 0..c.samples.rows() {
            s.push_str(
                &c.samples
                    .row(i)
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            s.push('\n');
        }
        fs::write(out.join("corner").join(&c.file_name), s)?;
    }
    for (name, p) in &outcome.provenance {
        let text =
            serde_json::to_string_pretty(p).map_err(|e| HarnessError::Config(e.to_string()))?;
        fs::write(out.join("provenance").join(name), text)?;
    }

    let mut errors = String::new();
    for (k, e) in outcome.errors() {
        let _ = writeln!(
            errors,
            "method={} n_calibration={} gamma={} tau={} repetition={}: {e}",
            k.method,
            k.n_calibration,
            opt(k.gamma),
            opt(k.tau),
            k.repetition
        );
    }
    fs::write(out.join("errors.log"), errors)?;

    let mut t = String::from("method,n_calibration,gamma,tau,repetition,seconds\n");
    for (k, secs) in &outcome.timings {
        let _ = writeln!(
            t,
            "{},{},{},{},{},{secs}",
            k.method,
            k.n_calibration,
            opt(k.gamma),
            opt(k.tau),
            k.repetition
        );
    }
    fs::write(out.join("timings.csv"), t)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Trains (or loads) the estimators, runs the grid and writes every output under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let models = train_models(cfg)?;
    let outcome = run_grid(cfg, &models)?;
    write_outputs(cfg, &outcome, &cfg.out_dir)?;
    Ok(outcome)
}
