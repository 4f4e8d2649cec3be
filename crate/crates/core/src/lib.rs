//! Robust posterior estimation for simulation-based inference under
//! simulator misspecification.
//!
//! The pipeline trains a neural posterior estimator on simulations
//! ([`npe`]), fine-tunes its statistic network on a small labelled
//! calibration set, couples real and simulated observations with
//! semi-balanced entropic optimal transport ([`ot`]), and mixes the
//! simulation posteriors with the coupling weights ([`rope`]). The
//! [`harness`] scores posteriors and runs reproducible experiment grids.

pub mod harness;
pub mod nn;
pub mod npe;
pub mod optim;
pub mod ot;
pub mod rope;
pub mod seed;
pub mod simulators;
pub mod tensor;

pub use simulators::{
    BoxPrior, LabeledDataset, Observation, Provenance, Simulator, SplitRole, Task, TaskId,
    ThetaVector,
};
pub use tensor::{Tape, Tensor, TensorError, Var};
