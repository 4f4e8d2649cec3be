//! Labelled `(θ, x)` tables, calibration/test splitting, and the text file format.
//!
//! File layout: one header line
//!
//! ```text
//! rope-dataset v1 task=<name> provenance=<simulated|real> role=<role> k=<k> d=<d> n=<n> seed=<seed>
//! ```
//!
//! followed by `n` comma-separated rows of `k + d` values (θ first). Values are
//! written in Rust's shortest round-trip notation, so save/load is bit-exact.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sample_pairs, BoxPrior, SimError, Simulator};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Simulated,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Calibration,
    CalibrationVal,
    Test,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),* })
            }
        }
        impl FromStr for $ty {
            type Err = SimError;
            fn from_str(s: &str) -> Result<Self, SimError> {
                match s {
                    $($text => Ok($variant),)*
                    other => Err(SimError::Format(format!("unknown value `{other}`"))),
                }
            }
        }
    };
}

text_enum!(Provenance { Provenance::Simulated => "simulated", Provenance::Real => "real" });
text_enum!(SplitRole {
    SplitRole::Train => "train",
    SplitRole::Calibration => "calibration",
    SplitRole::CalibrationVal => "calibration_val",
    SplitRole::Test => "test",
});

/// Parameter/observation pairs sharing task and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: String,
    pub provenance: Provenance,
    pub role: SplitRole,
    pub seed: u64,
    /// `[n, k]`
    pub thetas: Tensor,
    /// `[n, d]`
    pub obs: Tensor,
}

impl LabeledDataset {
    pub fn new(
        task: impl Into<String>,
        provenance: Provenance,
        role: SplitRole,
        seed: u64,
        thetas: Tensor,
        obs: Tensor,
    ) -> Result<Self, SimError> {
        if thetas.rows() != obs.rows() || thetas.shape().len() != 2 || obs.shape().len() != 2 {
            return Err(SimError::Format(format!(
                "θ table {:?} and observation table {:?} disagree",
                thetas.shape(),
                obs.shape()
            )));
        }
        Ok(Self {
            task: task.into(),
            provenance,
            role,
            seed,
            thetas,
            obs,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.thetas.cols()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.cols()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.len()).map(|i| (self.thetas.row(i), self.obs.row(i)))
    }

    /// Rows `idx` under a new role.
    pub fn subset(&self, idx: &[usize], role: SplitRole) -> Self {
        Self {
            task: self.task.clone(),
            provenance: self.provenance,
            role,
            seed: self.seed,
            thetas: self.thetas.select_rows(idx),
            obs: self.obs.select_rows(idx),
        }
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), SimError> {
        let mut w = BufWriter::new(w);
        writeln!(
            w,
            "rope-dataset v1 task={} provenance={} role={} k={} d={} n={} seed={}",
            self.task,
            self.provenance,
            self.role,
            self.theta_dim(),
            self.obs_dim(),
            self.len(),
            self.seed
        )?;
        let mut line = String::new();
        for (t, x) in self.pairs() {
            line.clear();
            for (j, v) in t.iter().chain(x).enumerate() {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:?}"));
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, SimError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| SimError::Format("empty file".into()))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("rope-dataset") || fields.next() != Some("v1") {
            return Err(SimError::Format(format!("bad header `{header}`")));
        }
        let mut get = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| SimError::Format(format!("bad header field `{f}`")))?;
            get.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| {
            get.get(k)
                .cloned()
                .ok_or_else(|| SimError::Format(format!("missing header field `{k}`")))
        };
        let num = |k: &str| -> Result<u64, SimError> {
            field(k)?
                .parse()
                .map_err(|_| SimError::Format(format!("field `{k}` is not an integer")))
        };
        let (k, d, n) = (num("k")? as usize, num("d")? as usize, num("n")? as usize);
        let mut thetas = Vec::with_capacity(n * k);
        let mut obs = Vec::with_capacity(n * d);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SimError::Format(format!("row {row}: {e}")))?;
            if vals.len() != k + d {
                return Err(SimError::Format(format!(
                    "row {row}: expected {} values, found {}",
                    k + d,
                    vals.len()
                )));
            }
            thetas.extend_from_slice(&vals[..k]);
            obs.extend_from_slice(&vals[k..]);
        }
        if thetas.len() != n * k {
            return Err(SimError::Format(format!(
                "header declares {n} rows, found {}",
                thetas.len() / k.max(1)
            )));
        }
        Self::new(
            field("task")?,
            field("provenance")?.parse()?,
            field("role")?.parse()?,
            num("seed")?,
            Tensor::matrix(n, k, thetas).expect("sized"),
            Tensor::matrix(n, d, obs).expect("sized"),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Simulates `n` labelled pairs with θ drawn from `prior`.
pub fn simulate_dataset(
    sim: &dyn Simulator,
    prior: &BoxPrior,
    n: usize,
    seed: u64,
    misspecified: bool,
    role: SplitRole,
) -> Result<LabeledDataset, SimError> {
    let (thetas, obs) = sample_pairs(sim, prior, n, seed, misspecified)?;
    let provenance = if misspecified {
        Provenance::Real
    } else {
        Provenance::Simulated
    };
    LabeledDataset::new(sim.name(), provenance, role, seed, thetas, obs)
}

/// Disjoint calibration (80%), calibration-validation (20%) and test sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub calibration: LabeledDataset,
    pub calibration_val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Shuffles `real` with `seed` and carves out `n_calibration` then `n_test` rows.
///
/// The validation share is `⌊n_calibration / 5⌋`, the rest is for training.
pub fn make_splits(
    real: &LabeledDataset,
    n_calibration: usize,
    n_test: usize,
    seed: u64,
) -> Result<Splits, SimError> {
    if n_calibration + n_test > real.len() {
        return Err(SimError::Split(format!(
            "{n_calibration} calibration + {n_test} test pairs requested from {} available; sets would overlap",
            real.len()
        )));
    }
    let mut idx: Vec<usize> = (0..real.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_val = n_calibration / 5;
    let n_train = n_calibration - n_val;
    Ok(Splits {
        calibration: real.subset(&idx[..n_train], SplitRole::Calibration),
        calibration_val: real.subset(&idx[n_train..n_calibration], SplitRole::CalibrationVal),
        test: real.subset(&idx[n_calibration..n_calibration + n_test], SplitRole::Test),
    })
}
