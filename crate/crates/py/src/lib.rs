//! Python bindings: plans, models, training, probes, and synthetic data.
//!
//! Tensors cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use saim::checkpoint::{
    encoder_to_checkpoint, model_from_checkpoint, model_to_checkpoint, Checkpoint,
};
use saim::imageio::{generate_synthetic as gen, AugmentConfig, ImageBatch};
use saim::model::{init_params, ModelParams};
use saim::patching::{gaussian_kernel as kernel, patchify};
use saim::permutation::{raster_plan, sample_plan, visible_count, PermutationPlan};
use saim::probes::{certify_no_leakage, grad_check as check, permutation_distribution_test};
use saim::rng::seeded;
use saim::trainer::{load_dataset, pretrain as run_pretrain, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A factorization order with its content and query masks.
#[pyclass(name = "Plan", module = "pysaim", frozen)]
struct PyPlan {
    inner: PermutationPlan,
}

#[pymethods]
impl PyPlan {
    /// Random order over `n` tokens.
    #[staticmethod]
    fn sample(n: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: sample_plan(n, &mut seeded(seed)).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn raster(n: usize) -> PyResult<Self> {
        Ok(Self {
            inner: raster_plan(n).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_noise(noise: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: PermutationPlan::from_noise(noise).map_err(value_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn order(&self) -> Vec<usize> {
        self.inner.order.clone()
    }

    #[getter]
    fn rank(&self) -> Vec<usize> {
        self.inner.rank.clone()
    }

    #[getter]
    fn content_mask(&self) -> Vec<Vec<bool>> {
        let m = &self.inner.content_mask;
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    #[getter]
    fn query_mask(&self) -> Vec<Vec<bool>> {
        let m = &self.inner.query_mask;
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    fn visible_count(&self, token: usize) -> PyResult<usize> {
        visible_count(&self.inner, token).map_err(|e| PyIndexError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Plan(order={:?})", self.inner.order)
    }
}

/// Two-stream model parameters.
#[pyclass(name = "Model", module = "pysaim")]
struct PyModel {
    inner: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters for the model section of a training config
    /// (`key = value` text; empty text gives the toy preset).
    #[new]
    #[pyo3(signature = (config = "", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig::parse(config).map_err(value_err)?;
        Ok(Self {
            inner: init_params(&cfg.model, &mut seeded(seed)).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(runtime_err)?;
        Ok(Self {
            inner: model_from_checkpoint(&ckpt).map_err(runtime_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_to_checkpoint(&self.inner)
            .save(&path)
            .map_err(runtime_err)
    }

    fn export_encoder(&self, path: PathBuf) -> PyResult<()> {
        encoder_to_checkpoint(&self.inner.export_encoder())
            .save(&path)
            .map_err(runtime_err)
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.config.n_tokens()
    }

    #[getter]
    fn patch_dim(&self) -> usize {
        self.inner.config.patch_dim()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.config.embed_dim
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.config.channels
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(name, shape)` for every trainable tensor.
    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.inner
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Predictions (`n_tokens × patch_dim`, flat) for one image given as
    /// channel-planar pixels (already normalized).
    fn forward(&self, pixels: Vec<f32>, plan: &PyPlan) -> PyResult<Vec<f32>> {
        let x = self.patches(pixels)?;
        Ok(self
            .inner
            .forward(&x, &plan.inner)
            .map_err(value_err)?
            .into_data())
    }

    /// Mask-free encoder output (`n_tokens × embed_dim`, flat).
    fn encoder_features(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = self.patches(pixels)?;
        Ok(self
            .inner
            .encoder_features(&x)
            .map_err(value_err)?
            .into_data())
    }

    /// `(passed, worst_protected_delta)` over random perturbation trials.
    #[pyo3(signature = (trials = 20, tolerance = 0.0, seed = 0))]
    fn certify_no_leakage(
        &self,
        trials: usize,
        tolerance: f32,
        seed: u64,
    ) -> PyResult<(bool, f32)> {
        let r = certify_no_leakage(&self.inner, trials, tolerance, &mut seeded(seed))
            .map_err(runtime_err)?;
        Ok((r.passed(), r.worst()))
    }
}

impl PyModel {
    fn patches(&self, pixels: Vec<f32>) -> PyResult<saim::patching::PatchSequence> {
        let c = &self.inner.config;
        let img = ImageBatch::new(1, c.channels, c.image_size, c.image_size, pixels)
            .map_err(value_err)?;
        Ok(patchify(&img, c.patch_size).map_err(value_err)?.remove(0))
    }
}

type Shape4 = (usize, usize, usize, usize);

/// `(pixels, (count, channels, size, size), labels)`.
#[pyfunction]
fn generate_synthetic(
    n: usize,
    size: usize,
    seed: u64,
) -> PyResult<(Vec<f32>, Shape4, Vec<usize>)> {
    let (b, labels) = gen(n, size, seed).map_err(value_err)?;
    Ok((b.pixels, (b.count, b.channels, b.height, b.width), labels))
}

/// Per-channel normalization with the default constants (mean 0.5, std 0.5).
#[pyfunction]
fn normalize(pixels: Vec<f32>) -> Vec<f32> {
    let cfg = AugmentConfig::default();
    pixels
        .into_iter()
        .map(|v| (v - cfg.mean[0]) / cfg.std[0])
        .collect()
}

/// Row-major `size × size` Gaussian weights.
#[pyfunction]
fn gaussian_kernel(size: usize, sigma: f64) -> PyResult<Vec<f64>> {
    Ok(kernel(size, sigma).map_err(value_err)?.weights)
}

type MetricRow = (u64, f64, f64);

/// Run pretraining from config text; returns `(step, lr, loss)` rows and the
/// trained model. `steps` overrides the configured step count.
#[pyfunction]
#[pyo3(signature = (config, out, steps = None))]
fn pretrain(
    py: Python<'_>,
    config: &str,
    out: PathBuf,
    steps: Option<u64>,
) -> PyResult<(Vec<MetricRow>, PyModel)> {
    let mut cfg = TrainConfig::parse(config).map_err(value_err)?;
    if let Some(s) = steps {
        cfg.total_steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s);
    }
    let state = py
        .detach(|| -> Result<_, saim::trainer::TrainError> {
            let data = load_dataset(&cfg, None)?;
            run_pretrain(&cfg, &data, &out, None)
        })
        .map_err(runtime_err)?;
    let rows = state
        .history
        .iter()
        .map(|r| (r.step, r.lr, r.loss))
        .collect();
    Ok((
        rows,
        PyModel {
            inner: state.params,
        },
    ))
}

/// Largest relative error between analytic and central-difference gradients
/// on the tiny 64-bit model.
#[pyfunction]
#[pyo3(signature = (seed = 0, eps = 1e-5))]
fn grad_check(seed: u64, eps: f64) -> PyResult<f64> {
    Ok(check(&saim::model::ModelConfig::tiny(), eps, seed)
        .map_err(runtime_err)?
        .max_rel_err)
}

/// `(counts, p_value, passed)` for the visible-count distribution of token 0.
#[pyfunction]
#[pyo3(signature = (n, samples = 100_000, seed = 0))]
fn permutation_distribution(
    n: usize,
    samples: usize,
    seed: u64,
) -> PyResult<(Vec<u64>, f64, bool)> {
    let r = permutation_distribution_test(n, samples, &mut seeded(seed)).map_err(value_err)?;
    Ok((r.counts.clone(), r.p_value, r.passed()))
}

#[pymodule]
fn pysaim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_distribution, m)?)?;
    Ok(())
}
