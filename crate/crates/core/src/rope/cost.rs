//! Transport costs in summary space.

use rayon::prelude::*;

use super::RopeError;
use crate::npe::Nse;
use crate::ot::CostMatrix;
use crate::tensor::Tensor;

/// Pairwise Euclidean distances between the rows of `a: [n, l]` and `b: [m, l]`.
pub fn summary_cost(a: &Tensor, b: &Tensor) -> Result<CostMatrix, RopeError> {
    if a.cols() != b.cols() {
        return Err(RopeError::Ot(crate::ot::OtError::Dim(format!(
            "observation summaries have {} columns, simulation summaries {}",
            a.cols(),
            b.cols()
        ))));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut c = vec![0.0; n * m];
    c.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let ai = a.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    });
    Ok(CostMatrix::new(
        Tensor::matrix(n, m, c)?,
        "euclidean summary distance",
    )?)
}

/// `C_ij = ‖g(x_o^i) − h(x_s^j)‖₂`.
pub fn build_cost(g: &Nse, h: &Nse, real: &Tensor, sims: &Tensor) -> Result<CostMatrix, RopeError> {
    summary_cost(&g.apply(real)?, &h.apply(sims)?)
}
