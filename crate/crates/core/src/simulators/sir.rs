//! Discrete-day stochastic SIR epidemic with binomial transitions.
//!
//! Each day `Binomial(S, 1 − exp(−β I / N))` susceptibles are infected and
//! `Binomial(I, 1 − exp(−γ))` infected recover. The observation is six summary
//! statistics of the daily new-infection counts. The "real" generator reports
//! weekend counts late: 5% of each Saturday and Sunday count moves to the
//! following Monday. Day 0 is a Monday.

use rand_distr::{Binomial, Distribution};

use super::{check_theta, BoxPrior, SimError, Simulator};
use crate::seed::{self, Rng};

#[derive(Debug, Clone)]
pub struct Sir {
    prior: BoxPrior,
    pub population: u64,
    pub initial_infected: u64,
    pub days: usize,
    pub weekend_delay: f64,
}

impl Default for Sir {
    fn default() -> Self {
        Self {
            prior: BoxPrior::new(vec![0.05, 0.02], vec![0.5, 0.25]),
            population: 100_000,
            initial_infected: 10,
            days: 365,
            weekend_delay: 0.05,
        }
    }
}

/// Latent compartments (`days + 1` entries) and daily new infections (`days` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct SirTrajectory {
    pub susceptible: Vec<u64>,
    pub infected: Vec<u64>,
    pub recovered: Vec<u64>,
    pub new_infections: Vec<f64>,
}

fn binomial(n: u64, p: f64, rng: &mut Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    Binomial::new(n, p.min(1.0))
        .expect("valid binomial")
        .sample(rng)
}

impl Sir {
    /// Runs the latent chain. Accepts `β = 0`; rejects negative rates and `γ <= 0`.
    pub fn run(&self, beta: f64, gamma: f64, rng: &mut Rng) -> Result<SirTrajectory, SimError> {
        if !(beta >= 0.0) || !(gamma > 0.0) {
            return Err(SimError::InvalidRate(format!("beta={beta}, gamma={gamma}")));
        }
        let n = self.population;
        let (mut s, mut i, mut r) = (n - self.initial_infected, self.initial_infected, 0u64);
        let mut traj = SirTrajectory {
            susceptible: vec![s],
            infected: vec![i],
            recovered: vec![r],
            new_infections: Vec::with_capacity(self.days),
        };
        let p_rec = 1.0 - (-gamma).exp();
        for _ in 0..self.days {
            let p_inf = 1.0 - (-beta * i as f64 / n as f64).exp();
            let new_inf = binomial(s, p_inf, rng);
            let new_rec = binomial(i, p_rec, rng);
            s -= new_inf;
            i = i + new_inf - new_rec;
            r += new_rec;
            traj.susceptible.push(s);
            traj.infected.push(i);
            traj.recovered.push(r);
            traj.new_infections.push(new_inf as f64);
        }
        Ok(traj)
    }

    /// Moves `fraction` of each Saturday/Sunday count to the next Monday in the horizon.
    pub fn delay_weekends(counts: &mut [f64], fraction: f64) {
        for d in 0..counts.len() {
            let shift = match d % 7 {
                5 => 2,
                6 => 1,
                _ => continue,
            };
            let monday = d + shift;
            if monday < counts.len() {
                let moved = fraction * counts[d];
                counts[d] -= moved;
                counts[monday] += moved;
            }
        }
    }
}

/// Mean, median, max, argmax day, half-total day, lag-1 autocorrelation.
pub fn summaries(daily: &[f64]) -> [f64; 6] {
    let n = daily.len();
    if n == 0 {
        return [0.0; 6];
    }
    let mean = daily.iter().sum::<f64>() / n as f64;
    let mut sorted = daily.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (argmax, max) =
        daily
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    let total: f64 = daily.iter().sum();
    let mut half_day = 0;
    if total > 0.0 {
        let mut cum = 0.0;
        for (d, &v) in daily.iter().enumerate() {
            cum += v;
            if cum >= 0.5 * total {
                half_day = d;
                break;
            }
        }
    }
    let denom: f64 = daily.iter().map(|v| (v - mean).powi(2)).sum();
    let autocorr = if denom > 0.0 {
        daily
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / denom
    } else {
        0.0
    };
    [mean, median, max, argmax as f64, half_day as f64, autocorr]
}

impl Simulator for Sir {
    fn name(&self) -> &str {
        "sir"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        6
    }

    fn summary_dim(&self) -> usize {
        5
    }

    fn simulate(&self, theta: &[f64], seed: u64, misspecified: bool) -> Result<Vec<f64>, SimError> {
        check_theta(self, theta)?;
        let mut rng = seed::rng(seed);
        let mut traj = self.run(theta[0], theta[1], &mut rng)?;
        if misspecified {
            Self::delay_weekends(&mut traj.new_infections, self.weekend_delay);
        }
        Ok(summaries(&traj.new_infections).to_vec())
    }
}
