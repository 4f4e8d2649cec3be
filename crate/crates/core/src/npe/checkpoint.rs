//! JSON checkpoints: versioned header, architecture, standardisation, parameter table.
//!
//! Floats are written in shortest round-trip form, so loading reproduces every
//! parameter bit for bit. Non-finite parameters cannot be saved.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowModel, FlowSpec, NpeError};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "rope-flow-checkpoint";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: FlowSpec,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    params: Vec<ParamEntry>,
}

fn param_names(model: &FlowModel) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..model.nse.mlp.layers().len() {
        names.push(format!("nse.{i}.weight"));
        names.push(format!("nse.{i}.bias"));
    }
    for (l, made) in model.flow.layers().iter().enumerate() {
        for i in 0..made.layers().len() {
            names.push(format!("flow.{l}.{i}.weight"));
            names.push(format!("flow.{l}.{i}.bias"));
        }
    }
    names
}

pub fn write_checkpoint(model: &FlowModel, w: impl Write) -> Result<(), NpeError> {
    model.check_finite()?;
    let params = param_names(model)
        .into_iter()
        .zip(model.params())
        .map(|(name, p)| ParamEntry {
            name,
            shape: p.shape().to_vec(),
            data: p.data().to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        input_mean: model.nse.mean.clone(),
        input_std: model.nse.std.clone(),
        params,
    };
    serde_json::to_writer(w, &ck).map_err(|e| NpeError::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(r: impl Read) -> Result<FlowModel, NpeError> {
    let ck: Checkpoint =
        serde_json::from_reader(r).map_err(|e| NpeError::Checkpoint(e.to_string()))?;
    if ck.format != FORMAT {
        return Err(NpeError::Checkpoint(format!(
            "unknown format `{}`",
            ck.format
        )));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(NpeError::Checkpoint(format!(
            "version {} is not supported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    let mut model = FlowModel::new(ck.spec, 0);
    if ck.input_mean.len() != model.obs_dim() || ck.input_std.len() != model.obs_dim() {
        return Err(NpeError::Checkpoint(
            "standardisation width disagrees with architecture".into(),
        ));
    }
    model.nse.mean = ck.input_mean;
    model.nse.std = ck.input_std;
    let names = param_names(&model);
    if ck.params.len() != names.len() {
        return Err(NpeError::Checkpoint(format!(
            "{} parameter tensors stored, architecture has {}",
            ck.params.len(),
            names.len()
        )));
    }
    for ((entry, name), slot) in ck.params.into_iter().zip(&names).zip(model.params_mut()) {
        if entry.name != *name || entry.shape != slot.shape() {
            return Err(NpeError::Checkpoint(format!(
                "parameter `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let t = Tensor::new(entry.shape, entry.data)?;
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &FlowModel, path: impl AsRef<Path>) -> Result<(), NpeError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FlowModel, NpeError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
