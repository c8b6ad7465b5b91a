//! Dense tensor values and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + row-major `f64` buffer: immutable once built,
//! safe to share across threads. Anything that needs gradients goes through a
//! [`Tape`], which owns all intermediate values and replays recorded ops in
//! reverse to populate gradients.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("tape already consumed by backward")]
    TapeConsumed,
}

/// Fill rule for [`Tensor::new`].
#[derive(Debug, Clone, Copy)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Uniform in `[lo, hi)`, drawn from the caller's seeded generator.
    Uniform { lo: f64, hi: f64 },
    /// Normal with the given mean and standard deviation.
    Normal { mean: f64, std: f64 },
}

/// Dense row-major tensor. No tape linkage; see [`Tape::leaf`] for that.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from an explicit fill rule. Seeded fills are
    /// reproducible given the same generator state.
    pub fn new(shape: &[usize], fill: Fill, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Constant(c) => vec![c; n],
            Fill::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(TensorError::InvalidArgument(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            }
            Fill::Normal { mean, std } => {
                let dist = Normal::new(mean, std).map_err(|e| {
                    TensorError::InvalidArgument(format!("normal fill: {e}"))
                })?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(TensorError::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Column vector `[n, 1]` from a slice.
    pub fn col(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    /// Row vector `[1, n]` from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Round every element to the nearest `f32` value. State that is
    /// persisted as `f32` on disk is kept on this grid in memory so that
    /// checkpoint round-trips are bit-exact.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape("empty shape".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}
