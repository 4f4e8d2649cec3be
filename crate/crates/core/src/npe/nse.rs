//! Statistic network: frozen input standardisation followed by a ReLU MLP.

use crate::nn::Mlp;
use crate::seed::Rng;
use crate::tensor::{Tape, Tensor, Var};

use super::NpeError;

#[derive(Debug, Clone, PartialEq)]
pub struct Nse {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mlp: Mlp,
}

impl Nse {
    /// `input → hidden… → output`, identity standardisation.
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self {
            mean: vec![0.0; input],
            std: vec![1.0; input],
            mlp: Mlp::new(&sizes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Sets column means and standard deviations from `x`; constant columns keep scale 1.
    pub fn fit_standardization(&mut self, x: &Tensor) {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return;
        }
        for j in 0..d {
            let m = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            self.mean[j] = m;
            self.std[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NpeError> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(NpeError::Dim {
                what: "observation",
                expected: self.input_dim(),
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn standardize(&self, x: &Tensor) -> Result<Tensor, NpeError> {
        self.check_input(x)?;
        let d = self.input_dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Ok(Tensor::matrix(x.rows(), d, data)?)
    }

    /// Summaries of an `[n, d]` batch, `[n, l]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, NpeError> {
        Ok(self.mlp.apply(&self.standardize(x)?))
    }

    /// Recorded forward pass with parameters bound by [`Mlp::bind`].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        x: &Tensor,
    ) -> Result<Var<'t>, NpeError> {
        let xs = tape.constant_owned(self.standardize(x)?);
        Ok(self.mlp.forward(vars, xs)?)
    }
}

/// Applies the statistic network to a batch.
pub fn nse_apply(params: &Nse, x: &Tensor) -> Result<Tensor, NpeError> {
    params.apply(x)
}
