//! Simulation-based calibration check on fresh simulated pairs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{mean_log_prob, FlowModel, NpeError};
use crate::seed;
use crate::simulators::{sample_pairs, Simulator};
use crate::tensor::Tensor;

/// Posterior draws per pair used to rank the true parameter.
pub const RANK_SAMPLES: usize = 99;
pub const RANK_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub n: usize,
    pub mean_log_prob: f64,
    /// Per θ dimension, counts of `rank / (RANK_SAMPLES + 1)` in equal bins.
    pub rank_histograms: Vec<Vec<usize>>,
    /// Per θ dimension, χ² goodness-of-fit p-value against a flat histogram.
    pub p_values: Vec<f64>,
}

/// Rank histograms and χ² p-values of each true `θ_i` among draws from `p̃(· | x_i)`.
pub fn rank_calibration(
    model: &FlowModel,
    thetas: &Tensor,
    xs: &Tensor,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, Vec<f64>), NpeError> {
    let n = thetas.rows();
    if n == 0 {
        return Err(NpeError::Empty(
            "calibration check needs at least one pair".into(),
        ));
    }
    let k = model.theta_dim();
    let summaries = model.summaries(xs)?;
    let mut hist = vec![vec![0usize; RANK_BINS]; k];
    for i in 0..n {
        let draws = model.sample(summaries.row(i), RANK_SAMPLES, seed::derive(seed, i as u64))?;
        for (d, h) in hist.iter_mut().enumerate() {
            let truth = thetas.get(i, d);
            let rank = (0..RANK_SAMPLES)
                .filter(|&s| draws.get(s, d) < truth)
                .count();
            h[rank * RANK_BINS / (RANK_SAMPLES + 1)] += 1;
        }
    }
    let chi2 = ChiSquared::new((RANK_BINS - 1) as f64).expect("positive degrees of freedom");
    let expected = n as f64 / RANK_BINS as f64;
    let p = hist
        .iter()
        .map(|h| {
            let stat: f64 = h
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            1.0 - chi2.cdf(stat)
        })
        .collect();
    Ok((hist, p))
}

/// Simulates `n` fresh well-specified pairs and reports log-probability and rank calibration.
pub fn posterior_predictive_check(
    model: &FlowModel,
    sim: &dyn Simulator,
    n: usize,
    seed: u64,
) -> Result<PpcReport, NpeError> {
    if n == 0 {
        return Err(NpeError::Empty(
            "calibration check needs at least one pair".into(),
        ));
    }
    let (thetas, xs) = sample_pairs(
        sim,
        sim.prior(),
        n,
        seed::derive_named(seed, "pairs"),
        false,
    )?;
    let (rank_histograms, p_values) =
        rank_calibration(model, &thetas, &xs, seed::derive_named(seed, "ranks"))?;
    Ok(PpcReport {
        n,
        mean_log_prob: mean_log_prob(model, &thetas, &xs)?,
        rank_histograms,
        p_values,
    })
}
