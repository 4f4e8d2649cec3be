//! Summary matrices as CSV: a `s0,s1,…` header, then one row per observation.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use rope_core::Tensor;

pub fn write(path: &Path, s: &Tensor) -> anyhow::Result<()> {
    let mut out = (0..s.cols())
        .map(|j| format!("s{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for i in 0..s.rows() {
        let row: Vec<String> = s.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<Tensor> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .with_context(|| format!("{}: empty file", path.display()))?;
    let cols = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}: row {r}", path.display()))?;
        if vals.len() != cols {
            bail!(
                "{}: row {r} has {} values, header has {cols}",
                path.display(),
                vals.len()
            );
        }
        data.extend(vals);
        rows += 1;
    }
    if rows == 0 {
        bail!("{}: no rows", path.display());
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}
