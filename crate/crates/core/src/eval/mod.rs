//! Evaluation and benchmarking: linear probe, compute-scaling measurements,
//! per-epoch timing reports, gradient saliency maps, and the
//! finite-difference verification suite.

mod bench;
mod gradcheck;
mod probe;
mod saliency;
mod timing;

pub use bench::{scaling_benchmark, write_scaling_csv, MixerFit, ScalingReport, ScalingRow};
pub use gradcheck::{gradcheck_suite, CheckReport};
pub use probe::{linear_probe, probe_features, ProbeOptions};
pub use saliency::{
    argmax_patch, saliency_from_checkpoint, saliency_map, SaliencyMap, SaliencyTarget,
};
pub use timing::{epoch_timing_report, write_timing_csv, RunSummary};

use crate::data::DataError;
use crate::tensor::TensorError;
use crate::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean Shannon entropy of a batch of distributions `[B, K]` given as rows.
/// Every row must sum to 1 within 1e-6.
pub fn entropy_monitor(rows: &[Vec<f64>]) -> Result<f64, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, p) in rows.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
            return Err(EvalError::InvalidArgument(format!(
                "row {i} is not a distribution (sum {sum})"
            )));
        }
        total += p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum::<f64>();
    }
    Ok(total / rows.len() as f64)
}
