//! Python bindings: models, attacks, toy training and the experiment runner.
//!
//! Batches cross the boundary as lists of flat rows; image models reshape
//! rows to their input shape.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use slatlab_core::attacks;
use slatlab_core::config::ExperimentConfig;
use slatlab_core::data::{gen_toy, ToySpec};
use slatlab_core::experiment::{self, RunOptions};
use slatlab_core::metrics::{self, boundary_nonrobust_ratio, MetricRecord, ProbeGrid};
use slatlab_core::models::{self, Activation};
use slatlab_core::training::{self, Method, TrainSpec};
use slatlab_core::{SlatError, Tensor};

fn err(e: SlatError) -> PyErr {
    match e {
        SlatError::NonFiniteGradient { .. } | SlatError::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>, sample_shape: &[usize]) -> PyResult<Tensor> {
    let b = rows.len();
    let t = Tensor::from_rows(&rows).map_err(err)?;
    t.reshape(&[&[b][..], sample_shape].concat()).map_err(err)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
}

/// A network with latent injection sites.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: models::Model,
}

#[pymethods]
impl PyModel {
    /// Two-input binary MLP with sites {0, 1}.
    #[staticmethod]
    #[pyo3(signature = (hidden=16, activation="relu", seed=0))]
    fn toy_mlp(hidden: usize, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(err)?;
        Ok(PyModel { inner: models::build_toy_mlp(hidden, act, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (d_in, classes, seed=0))]
    fn linear(d_in: usize, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: models::build_linear(d_in, classes, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (in_shape, classes, activation="relu", seed=0))]
    fn small_cnn(in_shape: Vec<usize>, classes: usize, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(err)?;
        Ok(PyModel { inner: models::build_small_cnn(&in_shape, classes, act, seed).map_err(err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn sites(&self) -> Vec<usize> {
        self.inner.sites().iter().copied().collect()
    }

    #[getter]
    fn eta(&self) -> BTreeMap<usize, f64> {
        self.inner.eta().clone()
    }

    fn set_eta(&mut self, eta: BTreeMap<usize, f64>) -> PyResult<()> {
        self.inner.set_eta(eta).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Logits for a batch of flat rows.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_tensor(x, self.inner.input_shape())?;
        Ok(tensor_to_rows(&self.inner.predict(&x).map_err(err)?))
    }

    /// Latent values at every site for a batch.
    fn latents(&self, x: Vec<Vec<f64>>) -> PyResult<BTreeMap<usize, Vec<Vec<f64>>>> {
        let x = rows_to_tensor(x, self.inner.input_shape())?;
        let pass = self.inner.forward_with_latents(&x, None).map_err(err)?;
        Ok(pass.latents().iter().map(|(&k, t)| (k, tensor_to_rows(t))).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(path).map_err(err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load_checkpoint(path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(name={:?}, sites={:?}, parameters={})", self.inner.name(), self.sites(), self.num_parameters())
    }
}

#[pyfunction]
#[pyo3(signature = (model, x, y, epsilon, clamp=None))]
fn fgsm(model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>, epsilon: f64, clamp: Option<(f64, f64)>) -> PyResult<Vec<Vec<f64>>> {
    let m = &model.inner;
    let x = rows_to_tensor(x, m.input_shape())?;
    Ok(tensor_to_rows(&attacks::fgsm(m, &x, &y, epsilon, clamp).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (model, x, y, epsilon, alpha, steps, restarts=1, clamp=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pgd(
    model: &PyModel,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    restarts: usize,
    clamp: Option<(f64, f64)>,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let m = &model.inner;
    let x = rows_to_tensor(x, m.input_shape())?;
    let xa = attacks::pgd(m, &x, &y, epsilon, alpha, steps, restarts, clamp, seed).map_err(err)?;
    Ok(tensor_to_rows(&xa))
}

/// `eta_k * sign(grad_{h_k} L)` at every site of the model.
#[pyfunction]
fn latent_deltas(model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<BTreeMap<usize, Vec<Vec<f64>>>> {
    let m = &model.inner;
    let x = rows_to_tensor(x, m.input_shape())?;
    let d = attacks::latent_deltas(m, &x, &y, m.eta()).map_err(err)?;
    Ok(d.iter().map(|(&k, t)| (k, tensor_to_rows(t))).collect())
}

#[pyfunction]
fn accuracy(model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
    let m = &model.inner;
    let x = rows_to_tensor(x, m.input_shape())?;
    metrics::accuracy(m, &x, &y).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (model, x, y, epsilon, seed=0))]
fn grad_alignment(model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>, epsilon: f64, seed: u64) -> PyResult<f64> {
    let m = &model.inner;
    let x = rows_to_tensor(x, m.input_shape())?;
    metrics::grad_alignment(m, &x, &y, epsilon, seed).map_err(err)
}

#[pyfunction]
fn cyclic_lr(step: usize, total_steps: usize, lr_max: f64, peak_fraction: f64) -> f64 {
    training::cyclic_lr(step, total_steps, lr_max, peak_fraction)
}

/// Samples of the 2-D Gaussian toy task as `(rows, labels)`.
#[pyfunction]
#[pyo3(signature = (n_per_class=500, seed=0, mu=(1.0, 0.05), sigma=(0.5, 0.02)))]
fn toy_data(n_per_class: usize, seed: u64, mu: (f64, f64), sigma: (f64, f64)) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = ToySpec { mu: [mu.0, mu.1], sigma: [sigma.0, sigma.1], n_per_class, seed };
    let (x, y) = gen_toy(&spec).map_err(err)?.all();
    Ok((tensor_to_rows(&x), y))
}

/// Trains `model` in place on toy data and returns the training losses.
#[pyfunction]
#[pyo3(signature = (model, method, epochs=20, batch=64, lr_max=0.2, epsilon=0.1, n_per_class=500, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    model: &mut PyModel,
    method: &str,
    epochs: usize,
    batch: usize,
    lr_max: f64,
    epsilon: f64,
    n_per_class: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let method: Method = method.parse().map_err(err)?;
    let data = gen_toy(&ToySpec { n_per_class, seed, ..Default::default() }).map_err(err)?;
    let spec = TrainSpec { method, epochs, batch, lr_max, epsilon, seed, ..Default::default() };
    let mut sink: Vec<MetricRecord> = Vec::new();
    let report = training::train(&mut model.inner, &data, &spec, None, &mut sink).map_err(err)?;
    Ok(report.losses)
}

/// `|n_y| / |n_x|` of the fitted toy decision boundary.
#[pyfunction]
#[pyo3(signature = (model, mu=(1.0, 0.05), sigma=(0.5, 0.02)))]
fn boundary_ratio(model: &PyModel, mu: (f64, f64), sigma: (f64, f64)) -> PyResult<f64> {
    boundary_nonrobust_ratio(&model.inner, &ProbeGrid::for_toy([mu.0, mu.1], [sigma.0, sigma.1])).map_err(err)
}

/// Runs a config file (with `section.key=value` overrides); returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, overrides=Vec::new()))]
fn run_experiment(config: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let cfg = ExperimentConfig::load(config, &overrides).map_err(err)?;
    let out = experiment::run(&cfg, &RunOptions::default()).map_err(err)?;
    serde_json::to_string(&out.summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn slatlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(latent_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(grad_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(cyclic_lr, m)?)?;
    m.add_function(wrap_pyfunction!(toy_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
