//! Python bindings: the main numeric types and operations of the pipeline,
//! enough to drive the encoder, the distillation math, and the verification
//! suite from a script.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sssl_core::data::{synth_dataset, Image, SynthSpec};
use sssl_core::encoder::{encode, EncoderConfig, EncoderParams, Mixer, Pooling};
use sssl_core::head::{distill_loss as core_distill_loss, TaggedDist};
use sssl_core::tensor::{Fill, Tape, Tensor as CoreTensor};
use std::path::PathBuf;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: CoreTensor::from_data(&shape, data).map_err(value_err)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor { inner: CoreTensor::zeros(&shape).map_err(value_err)? })
    }

    #[staticmethod]
    fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyTensor {
            inner: CoreTensor::new(&shape, Fill::Uniform { lo, hi }, &mut rng)
                .map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn normal(shape: Vec<usize>, mean: f64, std: f64, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyTensor {
            inner: CoreTensor::new(&shape, Fill::Normal { mean, std }, &mut rng)
                .map_err(value_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        let mut tape = Tape::new();
        let a = tape.constant(self.inner.clone());
        let b = tape.constant(other.inner.clone());
        let c = tape.matmul(a, b).map_err(value_err)?;
        Ok(PyTensor { inner: tape.value(c).clone() })
    }

    fn softmax(&self, temperature: f64) -> PyResult<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(self.inner.clone());
        let y = tape.softmax(x, temperature).map_err(value_err)?;
        Ok(PyTensor { inner: tape.value(y).clone() })
    }

    fn sigmoid(&self) -> PyResult<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(self.inner.clone());
        let y = tape.sigmoid(x).map_err(value_err)?;
        Ok(PyTensor { inner: tape.value(y).clone() })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, {} values)", self.inner.shape, self.inner.numel())
    }
}

/// Temperature softmax over a flat vector.
#[pyfunction]
fn softmax(values: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    let n = values.len();
    let t = CoreTensor::from_data(&[n], values).map_err(value_err)?;
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let y = tape.softmax(x, temperature).map_err(value_err)?;
    Ok(tape.value(y).data.clone())
}

/// Cross-entropy of one (teacher, student) distribution pair.
#[pyfunction]
fn distill_loss(p_t: Vec<f64>, p_s: Vec<f64>) -> PyResult<f64> {
    let k = p_t.len();
    let teacher = CoreTensor::from_data(&[k], p_t).map_err(value_err)?;
    let student = CoreTensor::from_data(&[p_s.len()], p_s).map_err(value_err)?;
    let mut tape = Tape::new();
    let sv = tape.constant(student);
    let loss = core_distill_loss(
        &mut tape,
        &[TaggedDist { view: 0, dist: teacher }],
        &[TaggedDist { view: 1, dist: sv }],
    )
    .map_err(value_err)?;
    Ok(tape.value(loss).data[0])
}

/// One EMA step: returns m * teacher + (1 - m) * student.
#[pyfunction]
fn ema_update(teacher: Vec<f64>, student: Vec<f64>, m: f64) -> PyResult<Vec<f64>> {
    let mut xi = teacher;
    sssl_core::train::ema_update(&mut xi, &student, m).map_err(value_err)?;
    Ok(xi)
}

/// Cosine momentum ramp from m_start (step 0) to m_end (total_steps).
#[pyfunction]
fn momentum_schedule(step: u64, total_steps: u64, m_start: f64, m_end: f64) -> f64 {
    sssl_core::train::momentum_schedule(step, total_steps, m_start, m_end)
}

fn encoder_config(
    patch_size: usize,
    model_dim: usize,
    state_dim: usize,
    depth: usize,
    bidirectional: bool,
) -> EncoderConfig {
    EncoderConfig {
        patch_size,
        model_dim,
        state_dim,
        depth,
        bidirectional,
        pooling: Pooling::Mean,
        mixer: Mixer::Ssm,
    }
}

/// Exact learnable-parameter count of the encoder.
#[pyfunction]
fn param_count(patch_size: usize, model_dim: usize, state_dim: usize, depth: usize) -> usize {
    sssl_core::encoder::param_count(&encoder_config(patch_size, model_dim, state_dim, depth, true))
}

/// Encode an RGB image (flat row-major pixels in [0,1]) with a seeded
/// random-initialization encoder; returns the pooled embedding.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn encode_pooled(
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    patch_size: usize,
    model_dim: usize,
    state_dim: usize,
    depth: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let image = Image::new(height, width, pixels).map_err(value_err)?;
    let cfg = encoder_config(patch_size, model_dim, state_dim, depth, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::init(&cfg, &mut rng).map_err(value_err)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = encode(&mut tape, &image, &cfg, &vars).map_err(value_err)?;
    Ok(tape.value(out.pooled).data.clone())
}

/// Generate the synthetic lesion dataset; returns the number of files.
#[pyfunction]
fn synth(out_dir: PathBuf, classes: usize, per_class: usize, size: usize, seed: u64) -> PyResult<usize> {
    let ds = synth_dataset(
        &out_dir,
        &SynthSpec { classes, per_class, image_size: size, seed },
    )
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(ds.items.len())
}

/// Run the finite-difference verification suite. Returns
/// (name, max_rel_err, tolerance, passed) per check.
#[pyfunction]
fn gradcheck(tolerance: f64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let reports = sssl_core::eval::gradcheck_suite(tolerance)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(reports
        .iter()
        .map(|r| (r.name.to_string(), r.max_rel_err, r.tolerance, r.passed()))
        .collect())
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn sssl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(encode_pooled, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
