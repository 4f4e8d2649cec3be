//! Semi-balanced entropic optimal transport between observations and simulations.
//!
//! The coupling `P` (`n_o × n_s`) minimises
//!
//! ```text
//! ⟨P, C⟩ + ρ KL(Pᵀ1 ‖ 1/n_s) + γ Σ P log P    subject to  P1 = 1/n_o
//! ```
//!
//! with `τ = ρ / (ρ + γ)`. At `τ = 1` the column marginal is enforced exactly.

mod sinkhorn;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub use sinkhorn::{sinkhorn, sinkhorn_semibalanced, DEFAULT_MAX_ITERS, DEFAULT_TOL};

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("cost matrix entry ({row}, {col}) = {value} is not finite and non-negative")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("transport problem has an empty side")]
    Empty,
    #[error("coupling entry ({row}, {col}) = {value} is negative")]
    NegativeMass { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("coupling file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-negative finite `n_o × n_s` costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Tensor,
    pub description: String,
}

impl CostMatrix {
    pub fn new(values: Tensor, description: impl Into<String>) -> Result<Self, OtError> {
        if values.shape().len() != 2 {
            return Err(OtError::Dim(format!(
                "cost must be a matrix, got {:?}",
                values.shape()
            )));
        }
        let cols = values.cols();
        if let Some((idx, &value)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(OtError::InvalidCost {
                row: idx / cols,
                col: idx % cols,
                value,
            });
        }
        Ok(Self {
            values,
            description: description.into(),
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, OtError> {
        let t = Tensor::from_rows(rows).map_err(|e| OtError::Dim(e.to_string()))?;
        Self::new(t, "explicit")
    }

    pub fn n_obs(&self) -> usize {
        self.values.rows()
    }

    pub fn n_sim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    /// Column-major copy for the column potential update.
    pub fn values_transposed(&self) -> Vec<f64> {
        let (n, m) = (self.n_obs(), self.n_sim());
        let c = self.values.data();
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = c[i * m + j];
            }
        }
        t
    }

    pub fn max(&self) -> f64 {
        self.values.data().iter().copied().fold(0.0, f64::max)
    }
}

/// Column-marginal treatment implied by `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    /// `τ = 1`: exact column constraint, `ρ = ∞`.
    Balanced,
    Relaxed {
        rho: f64,
    },
}

impl Marginal {
    /// `ρ`, infinite when balanced.
    pub fn rho(self) -> f64 {
        match self {
            Marginal::Balanced => f64::INFINITY,
            Marginal::Relaxed { rho } => rho,
        }
    }
}

/// Inverts `τ = ρ / (ρ + γ)`.
pub fn rho_from_tau(tau: f64, gamma: f64) -> Result<Marginal, OtError> {
    if !(gamma > 0.0) {
        return Err(OtError::Parameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(OtError::Parameter(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    if tau == 1.0 {
        return Ok(Marginal::Balanced);
    }
    Ok(Marginal::Relaxed {
        rho: tau * gamma / (1.0 - tau),
    })
}

/// `Σ q_j log(q_j n_s)` for the column sums `q` of `p`, with `0 log 0 = 0`.
pub fn column_kl(p: &Tensor) -> f64 {
    let n_s = p.cols() as f64;
    column_sums(p)
        .into_iter()
        .filter(|&q| q > 0.0)
        .map(|q| q * (q * n_s).ln())
        .sum()
}

pub fn row_sums(p: &Tensor) -> Vec<f64> {
    (0..p.rows()).map(|i| p.row(i).iter().sum()).collect()
}

pub fn column_sums(p: &Tensor) -> Vec<f64> {
    let mut q = vec![0.0; p.cols()];
    for i in 0..p.rows() {
        for (qj, v) in q.iter_mut().zip(p.row(i)) {
            *qj += v;
        }
    }
    q
}

/// `Σ P log P` with `0 log 0 = 0`.
pub fn neg_entropy(p: &Tensor) -> f64 {
    p.data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum()
}

/// Evaluates the transport objective exactly.
///
/// With `ρ = ∞` the KL term is zero when the column marginal holds to 1e-9
/// and infinite otherwise.
pub fn objective_value(p: &Tensor, c: &CostMatrix, gamma: f64, rho: f64) -> Result<f64, OtError> {
    if p.shape() != c.values().shape() {
        return Err(OtError::Dim(format!(
            "coupling {:?} vs cost {:?}",
            p.shape(),
            c.values().shape()
        )));
    }
    let cols = p.cols();
    if let Some((idx, &value)) = p.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(OtError::NegativeMass {
            row: idx / cols,
            col: idx % cols,
            value,
        });
    }
    let transport: f64 = p
        .data()
        .iter()
        .zip(c.values().data())
        .map(|(a, b)| a * b)
        .sum();
    let kl = column_kl(p);
    let kl_term = if rho.is_infinite() {
        let b = 1.0 / cols as f64;
        let off = column_sums(p)
            .iter()
            .map(|q| (q - b).abs())
            .fold(0.0, f64::max);
        if off < 1e-9 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        rho * kl
    };
    Ok(transport + kl_term + gamma * neg_entropy(p))
}

/// Solver output: the coupling plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub p: Tensor,
    pub gamma: f64,
    pub tau: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Row-constraint violation at the last iteration, before the final projection.
    pub marginal_error: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl Coupling {
    pub fn n_obs(&self) -> usize {
        self.p.rows()
    }

    pub fn n_sim(&self) -> usize {
        self.p.cols()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        row_sums(&self.p)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        column_sums(&self.p)
    }

    /// Shannon entropy `−Σ P log P`.
    pub fn entropy(&self) -> f64 {
        -neg_entropy(&self.p)
    }

    pub fn objective(&self, c: &CostMatrix) -> Result<f64, OtError> {
        let rho = rho_from_tau(self.tau, self.gamma)?.rho();
        objective_value(&self.p, c, self.gamma, rho)
    }

    /// Max `|row_sum − 1/n_o|` of the returned matrix.
    pub fn row_error(&self) -> f64 {
        let a = 1.0 / self.n_obs() as f64;
        self.row_sums()
            .iter()
            .map(|r| (r - a).abs())
            .fold(0.0, f64::max)
    }

    /// Max `|col_sum − 1/n_s|` of the returned matrix.
    pub fn column_error(&self) -> f64 {
        let b = 1.0 / self.n_sim() as f64;
        self.column_sums()
            .iter()
            .map(|q| (q - b).abs())
            .fold(0.0, f64::max)
    }

    /// Text dump: one header line, then `n_o` comma-separated rows.
    pub fn write_to(&self, w: impl Write) -> Result<(), OtError> {
        let mut w = BufWriter::new(w);
        writeln!(w, "{}", CouplingHeader::from(self))?;
        for i in 0..self.n_obs() {
            let row: Vec<String> = self.p.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump; potentials are not stored and come back empty.
    pub fn read_from(r: impl Read) -> Result<Self, OtError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| OtError::Format("empty file".into()))??;
        let h = CouplingHeader::parse(&header)?;
        let mut data = Vec::with_capacity(h.n_o * h.n_s);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                data.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| OtError::Format(e.to_string()))?,
                );
            }
        }
        let p = Tensor::matrix(h.n_o, h.n_s, data).map_err(|e| OtError::Format(e.to_string()))?;
        Ok(Self {
            p,
            gamma: h.gamma,
            tau: h.tau,
            iterations: h.iterations,
            converged: h.converged,
            marginal_error: h.marginal_error,
            f: Vec::new(),
            g: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OtError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OtError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct CouplingHeader {
    n_o: usize,
    n_s: usize,
    gamma: f64,
    tau: f64,
    iterations: usize,
    converged: bool,
    marginal_error: f64,
}

impl From<&Coupling> for CouplingHeader {
    fn from(c: &Coupling) -> Self {
        Self {
            n_o: c.n_obs(),
            n_s: c.n_sim(),
            gamma: c.gamma,
            tau: c.tau,
            iterations: c.iterations,
            converged: c.converged,
            marginal_error: c.marginal_error,
        }
    }
}

impl fmt::Display for CouplingHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rope-coupling v1 n_o={} n_s={} gamma={:?} tau={:?} iterations={} converged={} marginal_error={:?}",
            self.n_o, self.n_s, self.gamma, self.tau, self.iterations, self.converged, self.marginal_error
        )
    }
}

impl CouplingHeader {
    fn parse(line: &str) -> Result<Self, OtError> {
        let mut it = line.split_whitespace();
        if it.next() != Some("rope-coupling") || it.next() != Some("v1") {
            return Err(OtError::Format(format!("bad header `{line}`")));
        }
        let fields: std::collections::HashMap<&str, &str> =
            it.filter_map(|kv| kv.split_once('=')).collect();
        fn get<T: std::str::FromStr>(
            m: &std::collections::HashMap<&str, &str>,
            k: &str,
        ) -> Result<T, OtError> {
            m.get(k)
                .ok_or_else(|| OtError::Format(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| OtError::Format(format!("bad value for `{k}`")))
        }
        Ok(Self {
            n_o: get(&fields, "n_o")?,
            n_s: get(&fields, "n_s")?,
            gamma: get(&fields, "gamma")?,
            tau: get(&fields, "tau")?,
            iterations: get(&fields, "iterations")?,
            converged: get(&fields, "converged")?,
            marginal_error: get(&fields, "marginal_error")?,
        })
    }
}
