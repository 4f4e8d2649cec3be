//! Cancer and stromal cells on the unit square.
//!
//! `Poisson(λ_c)` cancer parents and `Poisson(λ_p)` stromal cells are placed
//! uniformly; every parent spawns `Poisson(λ_d)` daughter cancer cells at
//! Gaussian offsets. The "real" generator deletes daughters that landed within
//! `r₀` of their parent. Observations are the cancer count, the stromal count,
//! and the mean and max distance from each stromal cell to its nearest cancer
//! cell.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use super::{check_theta, BoxPrior, SimError, Simulator};
use crate::seed::{self, Rng};

type Point = [f64; 2];

#[derive(Debug, Clone)]
pub struct CellSimulator {
    prior: BoxPrior,
    pub daughter_sigma: f64,
    pub removal_radius: f64,
}

impl Default for CellSimulator {
    fn default() -> Self {
        Self {
            prior: BoxPrior::new(vec![5.0, 50.0, 0.0], vec![50.0, 500.0, 10.0]),
            daughter_sigma: 0.02,
            removal_radius: 0.01,
        }
    }
}

/// One realisation of the point process, before any removal.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPopulation {
    pub parents: Vec<Point>,
    /// Daughter position and distance to its parent.
    pub daughters: Vec<(Point, f64)>,
    pub stromal: Vec<Point>,
}

impl CellPopulation {
    /// Cancer cells, optionally dropping daughters closer than `radius` to their parent.
    pub fn cancer_cells(&self, remove_within: Option<f64>) -> Vec<Point> {
        let mut cells = self.parents.clone();
        cells.extend(
            self.daughters
                .iter()
                .filter(|(_, d)| remove_within.is_none_or(|r| *d >= r))
                .map(|(p, _)| *p),
        );
        cells
    }
}

fn poisson(rate: f64, rng: &mut Rng) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn uniform_points(n: usize, rng: &mut Rng) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect()
}

/// Count, count, mean and max nearest-cancer distance over stromal cells.
///
/// Without cancer cells every distance is the square's diameter `√2`; without
/// stromal cells both distance statistics are zero.
pub fn cell_summaries(cancer: &[Point], stromal: &[Point]) -> [f64; 4] {
    let nearest = |s: &Point| -> f64 {
        if cancer.is_empty() {
            return std::f64::consts::SQRT_2;
        }
        cancer
            .iter()
            .map(|c| ((c[0] - s[0]).powi(2) + (c[1] - s[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let dists: Vec<f64> = stromal.iter().map(nearest).collect();
    let (mean, max) = if dists.is_empty() {
        (0.0, 0.0)
    } else {
        (
            dists.iter().sum::<f64>() / dists.len() as f64,
            dists.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    [cancer.len() as f64, stromal.len() as f64, mean, max]
}

impl CellSimulator {
    pub fn generate(&self, theta: &[f64], rng: &mut Rng) -> CellPopulation {
        let (lc, lp, ld) = (theta[0], theta[1], theta[2]);
        let parents = uniform_points(poisson(lc, rng), rng);
        let stromal = uniform_points(poisson(lp, rng), rng);
        let offset = Normal::new(0.0, self.daughter_sigma).expect("sigma > 0");
        let mut daughters = Vec::new();
        for p in &parents {
            for _ in 0..poisson(ld, rng) {
                let dx = offset.sample(rng);
                let dy = offset.sample(rng);
                daughters.push(([p[0] + dx, p[1] + dy], (dx * dx + dy * dy).sqrt()));
            }
        }
        CellPopulation {
            parents,
            daughters,
            stromal,
        }
    }
}

impl Simulator for CellSimulator {
    fn name(&self) -> &str {
        "cs"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn summary_dim(&self) -> usize {
        4
    }

    fn simulate(&self, theta: &[f64], seed: u64, misspecified: bool) -> Result<Vec<f64>, SimError> {
        check_theta(self, theta)?;
        let pop = self.generate(theta, &mut seed::rng(seed));
        let cancer = pop.cancer_cells(misspecified.then_some(self.removal_radius));
        Ok(cell_summaries(&cancer, &pop.stromal).to_vec())
    }
}
