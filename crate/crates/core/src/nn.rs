//! Fully connected layers and ReLU MLPs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::tensor::{kernels, Result, Tape, Tensor, Var};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√in` initialisation.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(input, output, w).unwrap().requiring_grad(),
            bias: Tensor::vector(b).requiring_grad(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]).requiring_grad(),
            bias: Tensor::zeros(&[output]).requiring_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Tape-free forward on `n` rows.
    pub fn apply_plain(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (p, m) = (self.input_dim(), self.output_dim());
        let mut out = vec![0.0; n * m];
        kernels::matmul(x, self.weight.data(), &mut out, n, p, m);
        let b = self.bias.data();
        for row in out.chunks_mut(m) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        out
    }
}

/// Architecture descriptor for an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
}

/// ReLU network; the final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Linear::output_dim));
        MlpSpec { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
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

    /// Registers parameters on `tape` in [`Mlp::params`] order.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    /// Forward pass using variables produced by [`Mlp::bind`].
    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, wb) in vars.chunks(2).enumerate() {
            h = h.matmul(wb[0])?.add(wb[1])?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Tape-free forward on an `[n, in]` matrix.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply_plain(&h, n);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Tensor::matrix(n, self.output_dim(), h).unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = seed::rng(3);
        let mlp = Mlp::new(&[5, 8, 3], &mut rng);
        let x = Tensor::matrix(4, 5, (0..20).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let tape = Tape::new();
        let vars = mlp.bind(&tape, false);
        let y = mlp.forward(&vars, tape.constant(&x)).unwrap().data();
        let z = mlp.apply(&x);
        for (a, b) in y.iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(mlp.spec().sizes, vec![5, 8, 3]);
    }
}
