//! Coupling-weighted mixtures of simulation posteriors.
//!
//! Sampling draws component counts from the row of `α`, then sub-samples each
//! component's cached bank without replacement. A bank is an endless sequence
//! of fixed-size chunks, chunk `t` of component `j` being a pure function of
//! `(seed, j, t)`, so draws do not depend on which mixtures filled it first.

use std::sync::{Arc, Mutex};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};

use super::{check_index, PosteriorEstimator, RopeError};
use crate::npe::FlowModel;
use crate::ot::Coupling;
use crate::seed;
use crate::tensor::{kernels::logsumexp, Tensor};

/// Components below this weight are left out of the density.
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-12;

/// Lazily filled per-component θ samples, shareable between mixtures.
#[derive(Debug)]
pub struct SampleBanks {
    flow: Arc<FlowModel>,
    summaries: Tensor,
    chunk: usize,
    seed: u64,
    banks: Vec<Mutex<Vec<f64>>>,
}

impl SampleBanks {
    /// Banks for the simulation summaries `[n_s, l]`, grown `chunk` samples at a time.
    pub fn new(flow: Arc<FlowModel>, summaries: Tensor, chunk: usize, seed: u64) -> Self {
        let banks = (0..summaries.rows())
            .map(|_| Mutex::new(Vec::new()))
            .collect();
        Self {
            flow,
            summaries,
            chunk: chunk.max(1),
            seed,
            banks,
        }
    }

    pub fn n_components(&self) -> usize {
        self.summaries.rows()
    }

    pub fn flow(&self) -> &Arc<FlowModel> {
        &self.flow
    }

    pub fn summaries(&self) -> &Tensor {
        &self.summaries
    }

    /// `count` distinct bank entries of component `j`, chosen with `rng`.
    fn draw(&self, j: usize, count: usize, rng: &mut seed::Rng) -> Result<Vec<f64>, RopeError> {
        let k = self.flow.theta_dim();
        let chunks = count.div_ceil(self.chunk);
        let span = chunks * self.chunk;
        let mut bank = self.banks[j].lock().expect("bank lock poisoned");
        while bank.len() < span * k {
            let t = bank.len() / (self.chunk * k);
            let s = seed::derive(seed::derive(self.seed, j as u64), t as u64);
            let fresh = self.flow.sample(self.summaries.row(j), self.chunk, s)?;
            bank.extend_from_slice(fresh.data());
        }
        let mut out = Vec::with_capacity(count * k);
        for r in index::sample(rng, span, count) {
            out.extend_from_slice(&bank[r * k..(r + 1) * k]);
        }
        Ok(out)
    }
}

/// `p̃(θ | x_o^i) = Σ_j α_ij p̃(θ | x_s^j)`.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    /// `[n_o, n_s]`, rows sum to 1.
    pub alpha: Tensor,
    banks: Arc<SampleBanks>,
}

/// `α = n_o P⋆`; rows must sum to 1 within 1e-6.
pub fn assemble_posterior(
    coupling: &Coupling,
    banks: Arc<SampleBanks>,
) -> Result<MixturePosterior, RopeError> {
    if coupling.n_sim() != banks.n_components() {
        return Err(RopeError::Ot(crate::ot::OtError::Dim(format!(
            "coupling has {} simulations, banks {}",
            coupling.n_sim(),
            banks.n_components()
        ))));
    }
    let n_o = coupling.n_obs() as f64;
    let data: Vec<f64> = coupling.p.data().iter().map(|v| v * n_o).collect();
    let alpha = Tensor::matrix(coupling.n_obs(), coupling.n_sim(), data)?;
    MixturePosterior::new(alpha, banks)
}

impl MixturePosterior {
    pub fn new(alpha: Tensor, banks: Arc<SampleBanks>) -> Result<Self, RopeError> {
        for i in 0..alpha.rows() {
            let sum: f64 = alpha.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 || alpha.row(i).iter().any(|&a| a < 0.0) {
                return Err(RopeError::RowSum { row: i, sum });
            }
        }
        Ok(Self { alpha, banks })
    }

    pub fn banks(&self) -> &Arc<SampleBanks> {
        &self.banks
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        self.alpha.row(i)
    }

    /// Mixture log-density via log-sum-exp over components with `α_ij ≥ 1e-12`.
    pub fn mixture_log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError> {
        check_index(i, self.alpha.rows())?;
        let comps: Vec<usize> = self
            .alpha
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a >= MIN_COMPONENT_WEIGHT)
            .map(|(j, _)| j)
            .collect();
        let k = theta.len();
        let thetas = Tensor::matrix(comps.len(), k, theta.repeat(comps.len()))?;
        let summaries = self.banks.summaries.select_rows(&comps);
        let lp = self.banks.flow.log_prob(&thetas, &summaries)?;
        let terms: Vec<f64> = comps
            .iter()
            .zip(&lp)
            .map(|(&j, l)| self.alpha.get(i, j).ln() + l)
            .collect();
        Ok(logsumexp(&terms))
    }

    /// `n` draws for observation `i`.
    pub fn mixture_sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError> {
        check_index(i, self.alpha.rows())?;
        if n == 0 {
            return Err(RopeError::Empty("sample count must be at least 1".into()));
        }
        let k = self.banks.flow.theta_dim();
        let mut rng = seed::rng(seed);
        let dist =
            WeightedIndex::new(self.alpha.row(i)).map_err(|e| RopeError::Config(e.to_string()))?;
        let mut counts = vec![0usize; self.alpha.cols()];
        for _ in 0..n {
            counts[dist.sample(&mut rng)] += 1;
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                let draws = self.banks.draw(j, c, &mut rng)?;
                rows.extend(draws.chunks(k).map(<[f64]>::to_vec));
            }
        }
        rows.shuffle(&mut rng);
        Ok(Tensor::matrix(n, k, rows.concat())?)
    }
}

impl PosteriorEstimator for MixturePosterior {
    fn n_obs(&self) -> usize {
        self.alpha.rows()
    }

    fn theta_dim(&self) -> usize {
        self.banks.flow.theta_dim()
    }

    fn log_prob(&self, i: usize, theta: &[f64]) -> Result<f64, RopeError> {
        self.mixture_log_prob(i, theta)
    }

    fn sample(&self, i: usize, n: usize, seed: u64) -> Result<Tensor, RopeError> {
        self.mixture_sample(i, n, seed)
    }
}
