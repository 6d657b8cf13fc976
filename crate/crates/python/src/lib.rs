//! Python bindings: dataset generation, training, rendering and evaluation.

use std::path::PathBuf;

use dynfield::eval::{self, EvalOptions, MfeProtocol};
use dynfield::scene::{self, Dataset as CoreDataset, SceneSpec};
use dynfield::trainer::{self, TrainConfig, TrainState};
use dynfield::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: Error) -> PyErr {
    if e.is_bad_input() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Posed frames with timestamps and a train / test split.
#[pyclass(module = "dynfield_py")]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Loads a dataset directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        CoreDataset::load(&dir).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Renders a synthetic preset (`fall`, `orbit` or `bounce`).
    #[staticmethod]
    #[pyo3(signature = (preset, seed=0, frames=None, size=None))]
    fn generate(preset: &str, seed: u64, frames: Option<usize>, size: Option<usize>) -> PyResult<Self> {
        let mut spec = SceneSpec::preset(preset).map_err(py_err)?;
        if let Some(f) = frames {
            spec.frames = f;
        }
        if let Some(px) = size {
            spec.camera.width = px;
            spec.camera.height = px;
        }
        scene::generate(&spec, seed).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }

    #[getter]
    fn train_frames(&self) -> Vec<usize> {
        self.inner.split.train.clone()
    }

    #[getter]
    fn test_frames(&self) -> Vec<usize> {
        self.inner.split.test.clone()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.frames.iter().map(|f| f.time).collect()
    }

    /// `(min, max)` corners of the scene box.
    #[getter]
    fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        (self.inner.bbox.min, self.inner.bbox.max)
    }
}

/// Model, optimizer state and random stream of one training run.
#[pyclass(module = "dynfield_py")]
pub struct Trainer {
    state: TrainState,
}

fn loss_dict<'py>(py: Python<'py>, r: &trainer::StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    for (k, v) in r.terms.named() {
        d.set_item(k, v)?;
    }
    d.set_item("total", r.total)?;
    d.set_item("lr", r.lr)?;
    d.set_item("alive", r.alive)?;
    d.set_item("applied", r.applied)?;
    Ok(d)
}

#[pymethods]
impl Trainer {
    /// Starts a run on `dataset`. `config` is `key = value` text; keyword
    /// arguments override single keys.
    #[new]
    #[pyo3(signature = (dataset, config=None, **overrides))]
    fn new(dataset: &Dataset, config: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => TrainConfig::parse(text).map_err(py_err)?,
            None => TrainConfig::default(),
        };
        if let Some(o) = overrides {
            for (k, v) in o.iter() {
                let key: String = k.extract()?;
                let val = v.str()?.to_string();
                cfg.set(&key, &val).map_err(py_err)?;
            }
        }
        let state = TrainState::new(cfg, dataset.inner.bbox).map_err(py_err)?;
        Ok(Self { state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TrainState::load(&path).map(|state| Self { state }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn alive_particles(&self) -> usize {
        self.state.model.particles.alive_count()
    }

    #[getter]
    fn config(&self) -> String {
        self.state.config.to_text()
    }

    /// One optimization step; returns the logged loss terms.
    fn train_step<'py>(&mut self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let rec = py.allow_threads(|| self.state.train_step(&dataset.inner)).map_err(py_err)?;
        loss_dict(py, &rec)
    }

    /// Runs the full schedule, writing the run directory `out`.
    fn fit(&mut self, py: Python<'_>, dataset: &Dataset, out: PathBuf) -> PyResult<usize> {
        let (hist, _) = py
            .allow_threads(|| trainer::train_to_dir(&mut self.state, &dataset.inner, &out))
            .map_err(py_err)?;
        Ok(hist.steps.len())
    }

    /// Renders frame `index` of `dataset` (at `t` when given). Returns
    /// `(width, height, rgb8 bytes)`.
    #[pyo3(signature = (dataset, index, t=None, samples=None))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        index: usize,
        t: Option<f64>,
        samples: Option<usize>,
    ) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
        let frame = dataset
            .inner
            .frames
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range")))?;
        let n = samples.unwrap_or(self.state.config.samples_per_ray);
        let img = py
            .allow_threads(|| self.state.model.render_image(&frame.pose, t.unwrap_or(frame.time), n))
            .map_err(py_err)?;
        Ok((img.width, img.height, PyBytes::new(py, &img.to_rgb8())))
    }

    /// Evaluation report as JSON text.
    #[pyo3(signature = (dataset, mfe_res=30))]
    fn evaluate(&self, py: Python<'_>, dataset: &Dataset, mfe_res: usize) -> PyResult<String> {
        let opts = EvalOptions {
            samples_per_ray: self.state.config.samples_per_ray,
            eps_alpha: self.state.config.eps_alpha,
            protocol: MfeProtocol {
                res: mfe_res,
                ..MfeProtocol::default()
            },
            steps: self.state.step,
            baseline: None,
        };
        py.allow_threads(|| eval::evaluate(&self.state.model, &dataset.inner, &opts))
            .map(|r| r.to_json())
            .map_err(py_err)
    }

    /// Alive particle positions at `t`.
    fn particles_at(&self, t: f64) -> PyResult<Vec<[f64; 3]>> {
        dynfield::particles::alive_positions(&self.state.model.particles, &self.state.model.motion, t).map_err(py_err)
    }
}

#[pymodule]
fn dynfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    Ok(())
}
