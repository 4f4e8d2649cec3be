//! Elementwise logit map from the prior box onto `ℝ^k`.

use serde::{Deserialize, Serialize};

/// Per-dimension bounds; unbounded dimensions pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Squash {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bounded: Vec<bool>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Squash {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let bounded = vec![true; lo.len()];
        Self { lo, hi, bounded }
    }

    /// Identity map; `lo`/`hi` are unused placeholders.
    pub fn unbounded(k: usize) -> Self {
        Self {
            lo: vec![0.0; k],
            hi: vec![0.0; k],
            bounded: vec![false; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `θ ↦ z` and `log|dz/dθ|`; `None` on or outside the boundary.
    pub fn forward(&self, theta: &[f64], z: &mut [f64]) -> Option<f64> {
        let mut logdet = 0.0;
        for d in 0..self.dim() {
            let t = theta[d];
            if !t.is_finite() {
                return None;
            }
            if !self.bounded[d] {
                z[d] = t;
                continue;
            }
            let width = self.hi[d] - self.lo[d];
            let y = (t - self.lo[d]) / width;
            if !(y > 0.0 && y < 1.0) {
                return None;
            }
            let (ly, l1y) = (y.ln(), (-y).ln_1p());
            z[d] = ly - l1y;
            logdet -= width.ln() + ly + l1y;
        }
        Some(logdet)
    }

    pub fn inverse(&self, z: &[f64], theta: &mut [f64]) {
        for d in 0..self.dim() {
            theta[d] = if self.bounded[d] {
                let v = self.lo[d] + (self.hi[d] - self.lo[d]) * sigmoid(z[d]);
                v.clamp(self.lo[d], self.hi[d])
            } else {
                z[d]
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_jacobian() {
        let s = Squash::boxed(vec![0.0, 0.5], vec![3.0, 10.0]);
        let theta = [1.2, 7.7];
        let mut z = [0.0; 2];
        let ld = s.forward(&theta, &mut z).unwrap();
        let mut back = [0.0; 2];
        s.inverse(&z, &mut back);
        assert!((back[0] - theta[0]).abs() < 1e-13 && (back[1] - theta[1]).abs() < 1e-13);
        // numerical Jacobian of the diagonal map
        let h = 1e-6;
        let mut fd = 0.0;
        for d in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[d] += h;
            tm[d] -= h;
            let (mut zp, mut zm) = ([0.0; 2], [0.0; 2]);
            s.forward(&tp, &mut zp);
            s.forward(&tm, &mut zm);
            fd += ((zp[d] - zm[d]) / (2.0 * h)).ln();
        }
        assert!((fd - ld).abs() < 1e-7);
    }

    #[test]
    fn boundary_and_outside_are_rejected() {
        let s = Squash::boxed(vec![0.0], vec![1.0]);
        let mut z = [0.0];
        assert!(s.forward(&[0.0], &mut z).is_none());
        assert!(s.forward(&[1.0], &mut z).is_none());
        assert!(s.forward(&[-0.3], &mut z).is_none());
        assert!(s.forward(&[f64::NAN], &mut z).is_none());
    }

    #[test]
    fn extreme_latents_stay_in_the_box() {
        let s = Squash::boxed(vec![2.0], vec![5.0]);
        let mut t = [0.0];
        for z in [-800.0, -40.0, 0.0, 40.0, 800.0] {
            s.inverse(&[z], &mut t);
            assert!((2.0..=5.0).contains(&t[0]));
        }
    }
}
