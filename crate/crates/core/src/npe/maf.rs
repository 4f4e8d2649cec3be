//! Conditional masked affine autoregressive flow.
//!
//! Each MADE layer maps `z ↦ u = (z − μ(z_<, c)) · exp(−s(z_<, c))`, where the
//! ordering `<` alternates between natural and reversed across layers. The
//! log-scale is soft-clamped to `(−7, 7)` with `7·tanh(raw/7)`. The final
//! linear layer starts at zero so a fresh flow is the identity.

use crate::nn::Linear;
use crate::seed::Rng;
use crate::tensor::{kernels, Tape, Tensor, Var};

use super::NpeError;

pub const LOG_SCALE_BOUND: f64 = 7.0;

fn clamp_log_scale(raw: f64) -> f64 {
    LOG_SCALE_BOUND * (raw / LOG_SCALE_BOUND).tanh()
}

/// One masked autoencoder producing shifts and log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Made {
    theta_dim: usize,
    context_dim: usize,
    /// Autoregressive degree of each θ dimension, `1..=k`.
    degrees: Vec<usize>,
    layers: Vec<Linear>,
    masks: Vec<Tensor>,
}

impl Made {
    pub fn new(
        theta_dim: usize,
        context_dim: usize,
        hidden: &[usize],
        reversed: bool,
        rng: &mut Rng,
    ) -> Self {
        let k = theta_dim;
        let degrees: Vec<usize> = (0..k)
            .map(|d| if reversed { k - d } else { d + 1 })
            .collect();
        let mut in_deg: Vec<usize> = degrees.clone();
        in_deg.extend(std::iter::repeat_n(0, context_dim));
        let mut layers = Vec::new();
        let mut masks = Vec::new();
        for &h in hidden {
            let out_deg: Vec<usize> = (0..h).map(|j| j % k).collect();
            masks.push(mask(&in_deg, &out_deg, |i, o| o >= i));
            layers.push(Linear::new(in_deg.len(), h, rng));
            in_deg = out_deg;
        }
        let out_deg: Vec<usize> = (0..2 * k).map(|c| degrees[c % k]).collect();
        masks.push(mask(&in_deg, &out_deg, |i, o| o > i));
        layers.push(Linear::zeros(in_deg.len(), 2 * k));
        for (l, m) in layers.iter_mut().zip(&masks) {
            for (w, mv) in l.weight.data_mut().iter_mut().zip(m.data()) {
                *w *= mv;
            }
        }
        Self {
            theta_dim,
            context_dim,
            degrees,
            layers,
            masks,
        }
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Recorded `(μ, s)` for `z: [n, k]`, `ctx: [n, l]`.
    pub fn conditioner_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        z: Var<'t>,
        ctx: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), NpeError> {
        let k = self.theta_dim;
        let last = self.layers.len() - 1;
        let mut h = Var::concat(&[z, ctx])?;
        for (i, wb) in vars.chunks(2).enumerate() {
            let w = wb[0].mul(tape.constant(&self.masks[i]))?;
            h = h.matmul(w)?.add(wb[1])?;
            if i < last {
                h = h.relu();
            }
        }
        let mu = h.slice(0, k)?;
        let s = h
            .slice(k, 2 * k)?
            .scale(1.0 / LOG_SCALE_BOUND)
            .tanh()
            .scale(LOG_SCALE_BOUND);
        Ok((mu, s))
    }

    /// Plain evaluator with masks folded into the weights and the context term cached.
    fn plan(&self, ctx: &[f64], ctx_rows: usize) -> Plan {
        let k = self.theta_dim;
        let l = self.context_dim;
        let masked: Vec<Linear> = self
            .layers
            .iter()
            .zip(&self.masks)
            .map(|(lin, m)| {
                let mut lin = lin.clone();
                for (w, mv) in lin.weight.data_mut().iter_mut().zip(m.data()) {
                    *w *= mv;
                }
                lin
            })
            .collect();
        let first = &masked[0];
        let h1 = first.output_dim();
        let w = first.weight.data();
        let w_theta = w[..k * h1].to_vec();
        let mut ctx_term = vec![0.0; ctx_rows * h1];
        kernels::matmul(
            ctx,
            &w[k * h1..(k + l) * h1],
            &mut ctx_term,
            ctx_rows,
            l,
            h1,
        );
        for row in ctx_term.chunks_mut(h1) {
            for (v, b) in row.iter_mut().zip(first.bias.data()) {
                *v += b;
            }
        }
        Plan {
            k,
            h1,
            w_theta,
            ctx_term,
            ctx_rows,
            rest: masked[1..].to_vec(),
        }
    }
}

fn mask(in_deg: &[usize], out_deg: &[usize], allow: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = in_deg
        .iter()
        .flat_map(|&i| out_deg.iter().map(move |&o| (i, o)))
        .map(|(i, o)| if allow(i, o) { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(in_deg.len(), out_deg.len(), data).expect("mask shape")
}

struct Plan {
    k: usize,
    h1: usize,
    w_theta: Vec<f64>,
    ctx_term: Vec<f64>,
    ctx_rows: usize,
    rest: Vec<Linear>,
}

impl Plan {
    /// Row-major `[n, 2k]` of `(μ, s)` after clamping.
    fn eval(&self, z: &[f64], n: usize) -> Vec<f64> {
        let (k, h1) = (self.k, self.h1);
        let mut h = vec![0.0; n * h1];
        kernels::matmul(z, &self.w_theta, &mut h, n, k, h1);
        for (i, row) in h.chunks_mut(h1).enumerate() {
            let c = if self.ctx_rows == 1 { 0 } else { i };
            for (v, t) in row.iter_mut().zip(&self.ctx_term[c * h1..(c + 1) * h1]) {
                *v = (*v + t).max(0.0);
            }
        }
        let last = self.rest.len() - 1;
        for (i, lin) in self.rest.iter().enumerate() {
            h = lin.apply_plain(&h, n);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        for row in h.chunks_mut(2 * k) {
            for v in &mut row[k..] {
                *v = clamp_log_scale(*v);
            }
        }
        h
    }
}

/// Stack of MADE layers with alternating orderings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMaf {
    theta_dim: usize,
    context_dim: usize,
    layers: Vec<Made>,
}

impl ConditionalMaf {
    pub fn new(
        theta_dim: usize,
        context_dim: usize,
        n_layers: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| Made::new(theta_dim, context_dim, hidden, i % 2 == 1, rng))
            .collect();
        Self {
            theta_dim,
            context_dim,
            layers,
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn layers(&self) -> &[Made] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Made::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Made::params_mut).collect()
    }

    /// Recorded `z ↦ (u, Σ log|det|)`, `u: [n, k]`, log-det `[n]`.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        z: Var<'t>,
        ctx: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), NpeError> {
        let per = vars.len() / self.layers.len();
        let mut u = z;
        let mut logdet: Option<Var<'t>> = None;
        for (made, v) in self.layers.iter().zip(vars.chunks(per)) {
            let (mu, s) = made.conditioner_tape(tape, v, u, ctx)?;
            u = u.sub(mu)?.mul(s.neg().exp()?)?;
            let ld = s.sum_last()?.neg();
            logdet = Some(match logdet {
                Some(acc) => acc.add(ld)?,
                None => ld,
            });
        }
        let logdet = match logdet {
            Some(ld) => ld,
            None => tape.constant_owned(Tensor::zeros(&[u.shape()[0]])),
        };
        Ok((u, logdet))
    }

    /// Tape-free forward. `ctx` holds `n` rows, or one row shared by all.
    pub fn forward_plain(&self, z: &[f64], ctx: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.theta_dim;
        let ctx_rows = ctx.len() / self.context_dim.max(1);
        let mut u = z.to_vec();
        let mut logdet = vec![0.0; n];
        for made in &self.layers {
            let out = made.plan(ctx, ctx_rows).eval(&u, n);
            for i in 0..n {
                let o = &out[i * 2 * k..(i + 1) * 2 * k];
                for d in 0..k {
                    u[i * k + d] = (u[i * k + d] - o[d]) * (-o[k + d]).exp();
                    logdet[i] -= o[k + d];
                }
            }
        }
        (u, logdet)
    }

    /// Inverse map, `k` sequential passes per layer.
    pub fn inverse_plain(&self, u: &[f64], ctx: &[f64], n: usize) -> Vec<f64> {
        let k = self.theta_dim;
        let ctx_rows = ctx.len() / self.context_dim.max(1);
        let mut cur = u.to_vec();
        for made in self.layers.iter().rev() {
            let plan = made.plan(ctx, ctx_rows);
            let mut z = vec![0.0; n * k];
            for t in 1..=k {
                let d = made
                    .degrees
                    .iter()
                    .position(|&g| g == t)
                    .expect("degrees are a permutation");
                let out = plan.eval(&z, n);
                for i in 0..n {
                    let o = &out[i * 2 * k..(i + 1) * 2 * k];
                    z[i * k + d] = cur[i * k + d] * o[k + d].exp() + o[d];
                }
            }
            cur = z;
        }
        cur
    }
}
