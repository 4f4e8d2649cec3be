//! Frictionless pendulum observed at 200 times over ten seconds.
//!
//! The "real" generator multiplies the trajectory by a friction envelope
//! `exp(−α t)` with `α ~ U[0, 1]`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{check_theta, BoxPrior, SimError, Simulator};
use crate::seed::{self, Rng};

/// Latent nuisance draws for one pendulum trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumDraw {
    pub phase: f64,
    pub damping: f64,
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    prior: BoxPrior,
    pub noise_sigma: f64,
    pub n_times: usize,
    pub t_max: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            prior: BoxPrior::new(vec![0.0, 0.5], vec![3.0, 10.0]),
            noise_sigma: 0.1,
            n_times: 200,
            t_max: 10.0,
        }
    }
}

impl Pendulum {
    pub fn times(&self) -> Vec<f64> {
        let n = self.n_times;
        (0..n)
            .map(|i| self.t_max * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Noise-free `A·exp(−α t)·cos(ω₀ t + φ)` on the time grid.
    pub fn trajectory(&self, omega: f64, amplitude: f64, draw: PendulumDraw) -> Vec<f64> {
        self.times()
            .into_iter()
            .map(|t| (-draw.damping * t).exp() * amplitude * (omega * t + draw.phase).cos())
            .collect()
    }

    /// Trajectory plus white sensor noise drawn from `rng`.
    pub fn render(
        &self,
        omega: f64,
        amplitude: f64,
        draw: PendulumDraw,
        rng: &mut Rng,
    ) -> Vec<f64> {
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma > 0");
        let mut x = self.trajectory(omega, amplitude, draw);
        for v in &mut x {
            *v += noise.sample(rng);
        }
        x
    }

    /// Draws phase then friction; both are always drawn so the noise stream is shared.
    pub fn draw_nuisance(rng: &mut Rng) -> PendulumDraw {
        let phase = rng.random_range(-PI..PI);
        let damping = rng.random::<f64>();
        PendulumDraw { phase, damping }
    }
}

impl Simulator for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        self.n_times
    }

    fn summary_dim(&self) -> usize {
        10
    }

    fn nse_hidden(&self) -> Vec<usize> {
        vec![256, 128, 32]
    }

    fn simulate(&self, theta: &[f64], seed: u64, misspecified: bool) -> Result<Vec<f64>, SimError> {
        check_theta(self, theta)?;
        let mut rng = seed::rng(seed);
        let mut draw = Self::draw_nuisance(&mut rng);
        if !misspecified {
            draw.damping = 0.0;
        }
        Ok(self.render(theta[0], theta[1], draw, &mut rng))
    }
}
