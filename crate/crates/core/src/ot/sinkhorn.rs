//! Log-domain Sinkhorn for the semi-balanced problem.
//!
//! With `P_ij = exp((f_i + g_j − C_ij)/γ)`, the row potential projects onto
//! the hard constraint `P1 = 1/n_o`, and the column potential solves the
//! KL-relaxed column step, which is the balanced update scaled by `τ`:
//!
//! ```text
//! f_i = γ log a_i − γ LSE_j((g_j − C_ij)/γ)
//! g_j = τ · (γ log b_j − γ LSE_i((f_i − C_ij)/γ))
//! ```

use rayon::prelude::*;

use super::{CostMatrix, Coupling, OtError};
use crate::tensor::{kernels::logsumexp, Tensor};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// `out_i = γ log w − γ LSE_j((pot_j − M_ij)/γ)` over the rows of `m`.
fn softmin_rows(m: &[f64], cols: usize, pot: &[f64], gamma: f64, log_w: f64, out: &mut [f64]) {
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let row = &m[i * cols..(i + 1) * cols];
        let z: Vec<f64> = row.iter().zip(pot).map(|(c, p)| (p - c) / gamma).collect();
        *o = gamma * (log_w - logsumexp(&z));
    });
}

/// Max over rows of `|Σ_j P_ij − a|` for the current potentials.
fn row_violation(c: &[f64], cols: usize, f: &[f64], g: &[f64], gamma: f64, a: f64) -> f64 {
    f.par_iter()
        .enumerate()
        .map(|(i, fi)| {
            let row = &c[i * cols..(i + 1) * cols];
            let s: f64 = row
                .iter()
                .zip(g)
                .map(|(cij, gj)| ((fi + gj - cij) / gamma).exp())
                .sum();
            (s - a).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// Solves the semi-balanced entropic problem; `τ = 1` is balanced transport.
pub fn sinkhorn_semibalanced(
    cost: &CostMatrix,
    gamma: f64,
    tau: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Coupling, OtError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(OtError::Parameter(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(OtError::Parameter(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    let (n_o, n_s) = (cost.n_obs(), cost.n_sim());
    if n_o == 0 || n_s == 0 {
        return Err(OtError::Empty);
    }
    let c = cost.values().data();
    let ct = cost.values_transposed();
    let (a, b) = (1.0 / n_o as f64, 1.0 / n_s as f64);
    let (log_a, log_b) = (a.ln(), b.ln());
    let mut f = vec![0.0; n_o];
    let mut g = vec![0.0; n_s];
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        softmin_rows(c, n_s, &g, gamma, log_a, &mut f);
        softmin_rows(&ct, n_o, &f, gamma, log_b, &mut g);
        if tau < 1.0 {
            g.iter_mut().for_each(|v| *v *= tau);
        }
        violation = row_violation(c, n_s, &f, &g, gamma, a);
        if violation < tol {
            break;
        }
    }
    let converged = violation < tol;
    // Final row projection: the hard constraint holds even without convergence.
    softmin_rows(c, n_s, &g, gamma, log_a, &mut f);
    let p: Vec<f64> = (0..n_o)
        .flat_map(|i| {
            let (fi, g) = (f[i], &g);
            c[i * n_s..(i + 1) * n_s]
                .iter()
                .zip(g)
                .map(move |(cij, gj)| ((fi + gj - cij) / gamma).exp())
        })
        .collect();
    Ok(Coupling {
        p: Tensor::matrix(n_o, n_s, p).expect("sized"),
        gamma,
        tau,
        iterations,
        converged,
        marginal_error: violation,
        f,
        g,
    })
}

/// [`sinkhorn_semibalanced`] with the default tolerance and iteration cap.
pub fn sinkhorn(cost: &CostMatrix, gamma: f64, tau: f64) -> Result<Coupling, OtError> {
    sinkhorn_semibalanced(cost, gamma, tau, DEFAULT_MAX_ITERS, DEFAULT_TOL)
}
