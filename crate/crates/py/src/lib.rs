//! Python bindings: configuration, training, denoising, metrics and the
//! gradient-check suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dipnet::config::RunConfig;
use dipnet::data::{add_awgn, step_rng, ImageBuffer};
use dipnet::model::TransformNet;
use dipnet::train::{self, Trainer};
use dipnet::verify::{run_suite, Scope};
use dipnet::Error;

fn to_py(e: Error) -> PyErr {
    match dipnet::app::exit_code(&e) {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f32>, height: usize, width: usize, channels: usize) -> PyResult<ImageBuffer> {
    ImageBuffer::new(height, width, channels, data, "python").map_err(to_py)
}

/// Resolved run configuration.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = "", overrides = Vec::new()))]
    fn new(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::parse(text, &overrides).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(mode={}, steps={})", self.inner.train.mode, self.inner.train.max_steps)
    }
}

/// Step-wise access to a training run.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
    config_text: String,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let c = &config.inner;
        Ok(PyTrainer {
            inner: Trainer::new(c.train.clone(), c.model.clone(), c.data.clone()).map_err(to_py)?,
            config_text: c.to_text(),
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// One optimization step; returns the losses.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let l = self.inner.train_step().map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("l1", l.l1)?;
        d.set_item("prior", l.prior)?;
        d.set_item("disc", l.disc)?;
        Ok(d)
    }

    fn run(&mut self) -> PyResult<()> {
        self.inner.run().map_err(to_py)
    }

    /// `(sigma, psnr_db, ssim, psnr_noisy_db)` on the held-out images.
    fn evaluate(&self, sigmas: Vec<f64>, seed: u64) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let rows = train::evaluate(&self.inner.net, &self.inner.eval_images, &sigmas, seed).map_err(to_py)?;
        Ok(rows.into_iter().map(|r| (r.sigma, r.psnr_db, r.ssim, r.psnr_noisy_db)).collect())
    }

    /// Metric CSV rows recorded so far.
    fn metrics(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.csv_row()).collect()
    }

    fn domain_records(&self) -> Vec<String> {
        self.inner.domain_records.iter().map(|r| r.csv_row()).collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint(&self.config_text).save(&path).map_err(to_py)
    }
}

/// A trained denoiser loaded from a checkpoint.
#[pyclass(name = "Denoiser")]
struct PyDenoiser {
    net: TransformNet<f32>,
}

#[pymethods]
impl PyDenoiser {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDenoiser {
            net: dipnet::app::load_model(&path).map_err(to_py)?,
        })
    }

    /// Denoises a planar `channels x height x width` image in `[0, 1]`;
    /// returns planar RGB clamped to `[0, 1]`.
    fn denoise(&self, data: Vec<f32>, height: usize, width: usize, channels: usize) -> PyResult<Vec<f32>> {
        let img = image(data, height, width, channels)?;
        Ok(train::denoise_image(&self.net, &img).map_err(to_py)?.data)
    }
}

#[pyfunction]
pub fn psnr(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize, channels: usize) -> PyResult<f64> {
    train::psnr(&image(a, height, width, channels)?, &image(b, height, width, channels)?, 1.0).map_err(to_py)
}

#[pyfunction]
pub fn ssim(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize, channels: usize) -> PyResult<f64> {
    train::ssim(&image(a, height, width, channels)?, &image(b, height, width, channels)?).map_err(to_py)
}

/// Unclipped Gaussian noise with standard deviation `sigma / 255`.
#[pyfunction]
pub fn add_noise(data: Vec<f32>, height: usize, width: usize, channels: usize, sigma: f64, seed: u64) -> PyResult<Vec<f32>> {
    let img = image(data, height, width, channels)?;
    Ok(add_awgn(&img, sigma, &mut step_rng(seed, 0)).map_err(to_py)?.data)
}

/// `(raw, clamped)` divergence estimate from per-domain mean losses.
#[pyfunction]
pub fn h_divergence(per_domain_losses: Vec<f64>) -> PyResult<(f64, f64)> {
    let h = dipnet::losses::h_divergence_estimate(&per_domain_losses).map_err(to_py)?;
    Ok((h.raw, h.clamped))
}

#[pyfunction]
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> PyResult<f64> {
    train::cosine_lr(step, total, lr0).map_err(to_py)
}

/// Runs a gradient-check scope; returns `(case, seed, max_rel_error,
/// passed)` rows.
#[pyfunction]
pub fn gradcheck(scope: &str, seeds: Vec<u64>) -> PyResult<Vec<(String, u64, f64, bool)>> {
    let scope: Scope = scope.parse().map_err(to_py)?;
    let rows = run_suite(scope, &seeds, &Default::default()).map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.name, r.seed, r.report.max_rel_error, r.report.passed()))
        .collect())
}

#[pymodule]
pub fn pydipnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(h_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
