//! Experiment configuration, read from TOML or a named preset.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::npe::TrainConfig;
use crate::rope::{FineTuneConfig, JnpeConfig, MlpConfig};
use crate::simulators::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Prior,
    SbiRef,
    Npe,
    Jnpe,
    Mlp,
    Rope,
    RopeStar,
    OtOnly,
    TuningOnly,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Prior,
        Method::SbiRef,
        Method::Npe,
        Method::Jnpe,
        Method::Mlp,
        Method::Rope,
        Method::RopeStar,
        Method::OtOnly,
        Method::TuningOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prior => "prior",
            Method::SbiRef => "sbi-ref",
            Method::Npe => "npe",
            Method::Jnpe => "j-npe",
            Method::Mlp => "mlp",
            Method::Rope => "rope",
            Method::RopeStar => "rope-star",
            Method::OtOnly => "ot-only",
            Method::TuningOnly => "tuning-only",
        }
    }

    /// Whether the method solves a transport problem and so sweeps `γ`.
    pub fn uses_transport(self) -> bool {
        matches!(self, Method::Rope | Method::RopeStar | Method::OtOnly)
    }

    /// Whether the method needs labelled calibration pairs.
    pub fn uses_calibration(self) -> bool {
        matches!(
            self,
            Method::Jnpe | Method::Mlp | Method::Rope | Method::RopeStar | Method::TuningOnly
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown method `{s}`")))
    }
}

/// Where the parameters of real observations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealPrior {
    /// The assumed prior box.
    Full,
    /// The lower half of every dimension of the box.
    LowerHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskId,
    pub calibration_sizes: Vec<usize>,
    pub gammas: Vec<f64>,
    /// Marginal relaxation for `rope` and `ot-only`.
    pub taus: Vec<f64>,
    /// Marginal relaxation for `rope-star`.
    pub tau_star: f64,
    pub methods: Vec<Method>,
    pub n_test: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub real_prior: RealPrior,
    /// Posterior draws per test pair for ACAUC and coverage.
    pub calibration_samples: usize,
    pub coverage_levels: Vec<f64>,
    /// Test observations with dumped posterior samples, per cell of the first repetition.
    pub corner_observations: usize,
    pub corner_samples: usize,
    /// Fill `wall_clock_s`; breaks byte-identical reruns.
    pub record_wall_clock: bool,
    /// Simulations per test observation in the transport problem.
    pub sim_ratio: usize,
    pub bank_chunk: usize,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    pub jnpe: JnpeConfig,
    pub mlp: MlpConfig,
    /// Reuse trained estimators across runs, keyed by task, training config and seed.
    pub npe_cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Pendulum,
            calibration_sizes: vec![10, 50, 100, 1000],
            gammas: vec![0.5],
            taus: vec![1.0],
            tau_star: 0.9,
            methods: Method::ALL.to_vec(),
            n_test: 2000,
            repetitions: 3,
            seed: 0,
            out_dir: PathBuf::from("results"),
            real_prior: RealPrior::Full,
            calibration_samples: 1000,
            coverage_levels: super::metrics::default_levels(),
            corner_observations: 3,
            corner_samples: 1000,
            record_wall_clock: false,
            sim_ratio: 1,
            bank_chunk: 256,
            train: TrainConfig::default(),
            finetune: FineTuneConfig::default(),
            jnpe: JnpeConfig::default(),
            mlp: MlpConfig::default(),
            npe_cache: None,
        }
    }
}

impl ExperimentConfig {
    /// `default` mirrors the full method roster; `smoke` finishes in seconds.
    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        match name {
            "default" => Ok(Self::default()),
            "smoke" => Ok(Self {
                calibration_sizes: vec![10],
                n_test: 20,
                repetitions: 1,
                calibration_samples: 100,
                corner_observations: 1,
                corner_samples: 50,
                bank_chunk: 32,
                train: TrainConfig {
                    max_steps: 20,
                    val_interval: 10,
                    val_size: 1000,
                    batch_size: 50,
                    n_flow_layers: 2,
                    flow_hidden: vec![16],
                    ..TrainConfig::default()
                },
                finetune: FineTuneConfig {
                    steps: 10,
                    learning_rate: 1e-3,
                    ..FineTuneConfig::default()
                },
                jnpe: JnpeConfig {
                    steps: 10,
                    val_interval: 5,
                    ..JnpeConfig::default()
                },
                mlp: MlpConfig {
                    steps: 10,
                    ..MlpConfig::default()
                },
                ..Self::default()
            }),
            other => Err(HarnessError::Config(format!(
                "unknown preset `{other}` (expected `default` or `smoke`)"
            ))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self, HarnessError> {
        if Path::new(spec).exists() {
            Self::from_toml_str(&std::fs::read_to_string(spec)?)
        } else {
            let cfg = Self::preset(spec)?;
            cfg.validate()?;
            Ok(cfg)
        }
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_test == 0 || self.repetitions == 0 {
            return bad("n_test and repetitions must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.calibration_sizes.is_empty() {
            return bad("calibration_sizes is empty".into());
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return bad(format!("gamma {g} must be positive and finite"));
        }
        if let Some(t) = self
            .taus
            .iter()
            .chain([&self.tau_star])
            .find(|t| !(**t > 0.0 && **t <= 1.0))
        {
            return bad(format!("tau {t} outside (0, 1]"));
        }
        if self.methods.iter().any(|m| m.uses_transport()) && self.gammas.is_empty() {
            return bad("transport methods need at least one gamma".into());
        }
        if self
            .methods
            .iter()
            .any(|m| matches!(m, Method::Rope | Method::OtOnly))
            && self.taus.is_empty()
        {
            return bad("rope and ot-only need at least one tau".into());
        }
        if self.calibration_samples < super::metrics::MIN_CALIBRATION_SAMPLES {
            return bad(format!(
                "calibration_samples must be at least {}",
                super::metrics::MIN_CALIBRATION_SAMPLES
            ));
        }
        if self.coverage_levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("coverage levels must lie in (0, 1)".into());
        }
        if self.sim_ratio == 0 || self.bank_chunk == 0 {
            return bad("sim_ratio and bank_chunk must be at least 1".into());
        }
        if self.corner_observations > self.n_test {
            return bad("corner_observations exceeds n_test".into());
        }
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.finetune
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}
