//! Adam with bias correction.

use crate::tensor::{Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment buffers, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Applies one Adam update in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(TensorError::Optimizer(format!(
            "{} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(TensorError::Optimizer(format!(
            "learning rate {lr} must be > 0"
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(TensorError::Optimizer(format!(
                "slot {i}: parameter has {} values, gradient {}",
                p.numel(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}

/// Rescales the gradient set so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}
