//! Log-posterior probability and marginal calibration.
//!
//! The credible level of a true value `θ_d` under a posterior is the level of
//! the narrowest central interval that contains it. With `r` of `M` posterior
//! draws below `θ_d` it is `c = |2r/M − 1|`. Coverage at level `a` is the
//! fraction of pairs with `c ≤ a`, and the area between the diagonal and the
//! coverage curve is `mean(c) − ½`, which is how ACAUC is computed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::rope::PosteriorEstimator;
use crate::seed;
use crate::simulators::LabeledDataset;

/// Smallest accepted number of posterior draws per test pair.
pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// Mean log-probability of the true parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lpp {
    /// Over finite values only.
    pub mean: f64,
    pub stderr: f64,
    /// Pairs scored `−∞`, excluded from `mean`.
    pub n_neg_inf: usize,
    pub n: usize,
}

impl Lpp {
    /// Aggregates per-pair log-probabilities. `+∞` and NaN are errors.
    pub fn from_values(values: &[f64]) -> Result<Self, HarnessError> {
        if values.is_empty() {
            return Err(HarnessError::Empty("test set".into()));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(HarnessError::Metric(format!("log-probability {v}")));
        }
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len();
        // Welford updates keep a constant sequence's mean exact.
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, v) in finite.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (v - mean);
        }
        let (mean, stderr) = match n {
            0 => (f64::NEG_INFINITY, f64::NAN),
            1 => (mean, 0.0),
            _ => (mean, (m2 / (n - 1) as f64 / n as f64).sqrt()),
        };
        Ok(Self {
            mean,
            stderr,
            n_neg_inf: values.len() - n,
            n: values.len(),
        })
    }
}

/// Per-pair `log p̃(θ_i | x_i)`, in test order.
pub fn log_probs(
    est: &dyn PosteriorEstimator,
    test: &LabeledDataset,
) -> Result<Vec<f64>, HarnessError> {
    check_sizes(est, test)?;
    Ok((0..test.len())
        .into_par_iter()
        .map(|i| est.log_prob(i, test.thetas.row(i)))
        .collect::<Result<Vec<_>, _>>()?)
}

pub fn compute_lpp(
    est: &dyn PosteriorEstimator,
    test: &LabeledDataset,
) -> Result<Lpp, HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::Empty("test set".into()));
    }
    Lpp::from_values(&log_probs(est, test)?)
}

fn check_sizes(est: &dyn PosteriorEstimator, test: &LabeledDataset) -> Result<(), HarnessError> {
    if est.n_obs() != test.len() || est.theta_dim() != test.theta_dim() {
        return Err(HarnessError::Metric(format!(
            "estimator covers {} observations of dimension {}, test set has {} of dimension {}",
            est.n_obs(),
            est.theta_dim(),
            test.len(),
            test.theta_dim()
        )));
    }
    Ok(())
}

/// Central credible levels of the true values, `[pair][dimension]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleLevels {
    pub levels: Vec<Vec<f64>>,
    pub samples_per_pair: usize,
}

/// `c = |2r/M − 1|` with `r` the number of draws strictly below `truth`.
pub fn central_level(draws: impl Iterator<Item = f64>, truth: f64, m: usize) -> f64 {
    let r = draws.filter(|&v| v < truth).count();
    (2.0 * r as f64 / m as f64 - 1.0).abs()
}

impl CredibleLevels {
    /// Draws `m` samples per test pair; pair `i` uses seed `derive(seed, i)`.
    pub fn collect(
        est: &dyn PosteriorEstimator,
        test: &LabeledDataset,
        m: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        if m < MIN_CALIBRATION_SAMPLES {
            return Err(HarnessError::Metric(format!(
                "{m} posterior samples per pair, at least {MIN_CALIBRATION_SAMPLES} required"
            )));
        }
        if test.is_empty() {
            return Err(HarnessError::Empty("test set".into()));
        }
        check_sizes(est, test)?;
        let k = test.theta_dim();
        let levels = (0..test.len())
            .into_par_iter()
            .map(|i| {
                let s = est.sample(i, m, seed::derive(seed, i as u64))?;
                Ok((0..k)
                    .map(|d| central_level((0..m).map(|r| s.get(r, d)), test.thetas.get(i, d), m))
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>, HarnessError>>()?;
        Ok(Self {
            levels,
            samples_per_pair: m,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.levels.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    /// Per dimension: `(1/n) Σ_i (c_(i) − (i + ½)/n)` over sorted levels,
    /// averaged over dimensions. Positive means overconfident.
    pub fn acauc(&self) -> f64 {
        let (n, k) = (self.n_pairs(), self.theta_dim());
        let mut total = 0.0;
        for d in 0..k {
            let mut c: Vec<f64> = self.levels.iter().map(|l| l[d]).collect();
            c.sort_by(f64::total_cmp);
            total += c
                .iter()
                .enumerate()
                .map(|(i, v)| v - (i as f64 + 0.5) / n as f64)
                .sum::<f64>()
                / n as f64;
        }
        total / k as f64
    }

    /// Empirical coverage of each level, per dimension and averaged.
    pub fn coverage(&self, levels: &[f64]) -> Result<CoverageCurve, HarnessError> {
        if let Some(a) = levels.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(HarnessError::Metric(format!(
                "credible level {a} outside (0, 1)"
            )));
        }
        let (n, k) = (self.n_pairs() as f64, self.theta_dim());
        let per_dim: Vec<Vec<f64>> = (0..k)
            .map(|d| {
                levels
                    .iter()
                    .map(|&a| self.levels.iter().filter(|l| l[d] <= a).count() as f64 / n)
                    .collect()
            })
            .collect();
        let mean = (0..levels.len())
            .map(|j| per_dim.iter().map(|c| c[j]).sum::<f64>() / k as f64)
            .collect();
        Ok(CoverageCurve {
            levels: levels.to_vec(),
            per_dim,
            mean,
        })
    }
}

/// Credible level against empirical coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    /// `[dimension][level]`
    pub per_dim: Vec<Vec<f64>>,
    /// Average over dimensions.
    pub mean: Vec<f64>,
}

impl CoverageCurve {
    /// `sup_a |coverage(a) − a|` of the averaged curve.
    pub fn max_deviation(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.mean)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max)
    }
}

/// ACAUC from `m` draws per test pair.
pub fn compute_acauc(
    est: &dyn PosteriorEstimator,
    test: &LabeledDataset,
    m: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    Ok(CredibleLevels::collect(est, test, m, seed)?.acauc())
}

pub fn coverage_curve(
    est: &dyn PosteriorEstimator,
    test: &LabeledDataset,
    m: usize,
    levels: &[f64],
    seed: u64,
) -> Result<CoverageCurve, HarnessError> {
    CredibleLevels::collect(est, test, m, seed)?.coverage(levels)
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_levels() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Two-sided Kolmogorov–Smirnov distance between `samples` and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels(rows: Vec<Vec<f64>>) -> CredibleLevels {
        CredibleLevels {
            levels: rows,
            samples_per_pair: 100,
        }
    }

    #[test]
    fn sorted_sum_equals_mean_minus_half() {
        let c = levels(vec![vec![0.9], vec![0.1], vec![0.35], vec![0.6]]);
        let mean = (0.9 + 0.1 + 0.35 + 0.6) / 4.0;
        assert!((c.acauc() - (mean - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn extremes_give_plus_and_minus_half() {
        assert!((levels(vec![vec![1.0]; 50]).acauc() - 0.5).abs() < 1e-15);
        assert!((levels(vec![vec![0.0]; 50]).acauc() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn central_level_of_the_median_is_zero() {
        let draws = (0..100).map(|i| i as f64);
        assert_eq!(central_level(draws.clone(), 49.5, 100), 0.0);
        assert_eq!(central_level(draws.clone(), -1.0, 100), 1.0);
        assert_eq!(central_level(draws, 1e9, 100), 1.0);
    }

    #[test]
    fn neg_inf_is_counted_not_averaged() {
        let l = Lpp::from_values(&[-1.0, f64::NEG_INFINITY, -3.0]).unwrap();
        assert_eq!((l.mean, l.n_neg_inf, l.n), (-2.0, 1, 3));
        assert!((l.stderr - 1.0).abs() < 1e-15);
        assert!(Lpp::from_values(&[]).is_err());
        let c = Lpp::from_values(&[-28.5f64.ln(); 2000]).unwrap();
        assert_eq!((c.mean, c.stderr), (-28.5f64.ln(), 0.0));
        assert!(Lpp::from_values(&[f64::NAN]).is_err());
    }

    #[test]
    fn ks_of_a_uniform_grid() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!((ks_statistic(&s, |x| x) - 0.0005).abs() < 1e-12);
    }
}
