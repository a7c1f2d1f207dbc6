//! Python bindings: models, datasets, training and metrics.

use std::fmt::Display;
use std::path::PathBuf;

use able_core::diffcore::Checkpoint;
use able_core::evalviz::{self, ImageBuffer, Perturbation};
use able_core::model::{self, AbleModel, ModelConfig, RayOutput};
use able_core::sampling::generate_rays;
use able_core::scenes::{self, SceneDataset, Split, SyntheticScene};
use able_core::trainer::{self, TrainConfig, Trainer};
use able_core::vr_oracle::{self, PointRadiance};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if v.is_instance_of::<PyBool>() {
        Ok(v.extract::<bool>()?.into())
    } else if v.is_instance_of::<PyInt>() {
        Ok(v.extract::<i64>()?.into())
    } else if v.is_instance_of::<PyFloat>() {
        Ok(v.extract::<f64>()?.into())
    } else if v.is_instance_of::<PyString>() {
        Ok(v.extract::<String>()?.into())
    } else {
        Err(err(format!("unsupported config value {v}")))
    }
}

/// Starts from `T::default()` and overrides the keys in `d`; unknown keys are rejected.
fn config_from<T: Serialize + DeserializeOwned + Default>(base: T, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut json = serde_json::to_value(base).map_err(err)?;
    let obj = json.as_object_mut().expect("configs serialize as objects");
    if let Some(d) = d {
        for (k, v) in d.iter() {
            let k: String = k.extract()?;
            if !obj.contains_key(&k) {
                return Err(err(format!("unknown config key `{k}`")));
            }
            obj.insert(k, to_json(&v)?);
        }
    }
    serde_json::from_value(json).map_err(err)
}

fn config_dict<'py>(py: Python<'py>, cfg: &impl Serialize) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let json = serde_json::to_value(cfg).map_err(err)?;
    for (k, v) in json.as_object().expect("configs serialize as objects") {
        match v {
            serde_json::Value::Bool(b) => d.set_item(k, *b)?,
            serde_json::Value::Number(n) if n.is_u64() => d.set_item(k, n.as_u64())?,
            serde_json::Value::Number(n) => d.set_item(k, n.as_f64())?,
            other => d.set_item(k, other.to_string())?,
        }
    }
    Ok(d)
}

type Rows = Vec<Vec<[f64; 3]>>;

fn to_rows(img: &ImageBuffer) -> Rows {
    img.pixels().chunks(img.width()).map(<[_]>::to_vec).collect()
}

fn from_rows(rows: Rows) -> PyResult<ImageBuffer> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(err("image rows differ in length"));
    }
    ImageBuffer::new(w, h, rows.into_iter().flatten().collect()).map_err(err)
}

fn ray_dict<'py>(py: Python<'py>, o: &RayOutput) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rgb_coarse", o.rgb_coarse)?;
    d.set_item("rgb_fine", o.rgb_fine)?;
    d.set_item("direct_rgb", o.direct_rgb)?;
    d.set_item("viewdep_rgb", o.viewdep_rgb)?;
    d.set_item("attn_coarse", o.attn_coarse.clone())?;
    d.set_item("attn_fine", o.attn_fine.clone())?;
    d.set_item("fine_intervals", o.fine_intervals.iter().map(|iv| (iv.t0, iv.t1)).collect::<Vec<_>>())?;
    d.set_item("depth", o.depth)?;
    d.set_item("expected_depth", o.expected_depth)?;
    Ok(d)
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().map_err(err)
}

/// An attention-based radiance field with f32 parameters.
#[pyclass(name = "Model", module = "able_nerf", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: AbleModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Initialises a model; `config` overrides default hyper-parameters.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(ModelConfig::default(), config)?;
        Ok(Self { inner: AbleModel::init(cfg, seed).map_err(err)? })
    }

    /// A small model for quick experiments.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn tiny(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: AbleModel::init(ModelConfig::tiny(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner: AbleModel::from_checkpoint(&ck).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(serde_json::json!({})).save(&path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        config_dict(py, &self.inner.config)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.numel()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().cloned().collect()
    }

    /// Renders the given `(row, col)` pixels of one dataset view without jitter.
    #[pyo3(signature = (dataset, view, pixels, chunk = 256))]
    fn render_pixels<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        view: usize,
        pixels: Vec<(usize, usize)>,
        chunk: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ds = &dataset.inner;
        let cam = ds.cameras.get(view).ok_or_else(|| err(format!("view {view} out of range")))?;
        let rays = generate_rays(cam, &pixels).map_err(err)?;
        let outs = self.inner.render_rays(&rays, ds.near, ds.far, chunk).map_err(err)?;
        outs.iter().map(|o| ray_dict(py, o)).collect()
    }

    /// Renders a full view; returns `(image_rows, depth_rows)`.
    #[pyo3(signature = (dataset, view, chunk = 256))]
    fn render_view(&self, py: Python<'_>, dataset: &PyDataset, view: usize, chunk: usize) -> PyResult<(Rows, Vec<Vec<f64>>)> {
        let ds = &dataset.inner;
        let cam = ds.cameras.get(view).ok_or_else(|| err(format!("view {view} out of range")))?.clone();
        let (near, far) = (ds.near, ds.far);
        let inner = &self.inner;
        let (img, outs) = py.detach(|| evalviz::render_view(inner, &cam, near, far, chunk)).map_err(err)?;
        let depth = outs.chunks(cam.width).map(|r| r.iter().map(|o| o.depth).collect()).collect();
        Ok((to_rows(&img), depth))
    }

    /// A copy with the learnable-embedding bank replaced: `mode` is "gaussian" or "zero".
    #[pyo3(signature = (mode = "gaussian", sigma = 0.1, seed = 0))]
    fn perturb_le(&self, mode: &str, sigma: f64, seed: u64) -> PyResult<Self> {
        let mode = match mode {
            "gaussian" => Perturbation::Gaussian { sigma },
            "zero" => Perturbation::Zero,
            other => return Err(err(format!("unknown perturbation `{other}`"))),
        };
        let ck = evalviz::perturb_le(&self.inner.to_checkpoint(serde_json::json!({})), mode, seed).map_err(err)?;
        Ok(Self { inner: AbleModel::from_checkpoint(&ck).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(dim={}, layers={}/{}, n_le={}, mask={})", c.dim, c.coarse_layers, c.fine_layers, c.n_le, c.use_mask)
    }
}

/// Posed RGB views of one split.
#[pyclass(name = "Dataset", module = "able_nerf", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SceneDataset,
    scene: Option<SyntheticScene>,
}

#[pymethods]
impl PyDataset {
    /// Loads `transforms_{split}.json` and its images from a Blender-format directory.
    #[staticmethod]
    #[pyo3(signature = (path, split = "train", downscale = 1))]
    fn load_blender(path: PathBuf, split: &str, downscale: usize) -> PyResult<Self> {
        Ok(Self { inner: scenes::load_blender(&path, parse_split(split)?, downscale).map_err(err)?, scene: None })
    }

    /// Renders orbit views of a built-in ("default", "sphere") or text-described scene.
    #[staticmethod]
    #[pyo3(signature = (scene = "default", views = 4, res = 32, seed = 0))]
    fn synthetic(py: Python<'_>, scene: &str, views: usize, res: usize, seed: u64) -> PyResult<Self> {
        let scene = match scene {
            "default" => SyntheticScene::default_scene(),
            "sphere" => SyntheticScene::sphere_scene(),
            text => SyntheticScene::parse(text).map_err(err)?,
        };
        let inner = py.detach(|| scenes::generate_synthetic_dataset(&scene, views, res, seed)).map_err(err)?;
        Ok(Self { inner, scene: Some(scene) })
    }

    /// The same cameras rotated by `degrees` of azimuth; synthetic datasets only.
    #[pyo3(signature = (degrees = 6.0, split = "test"))]
    fn nearby(&self, py: Python<'_>, degrees: f64, split: &str) -> PyResult<Self> {
        let scene = self.scene.clone().ok_or_else(|| err("nearby views need a synthetic scene"))?;
        let split = parse_split(split)?;
        let inner = py.detach(|| scenes::nearby_views(&scene, &self.inner, degrees, split)).map_err(err)?;
        Ok(Self { inner, scene: Some(scene) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        scenes::save_blender(&self.inner, &path).map_err(err)
    }

    fn image(&self, view: usize) -> PyResult<Rows> {
        self.inner.images.get(view).map(to_rows).ok_or_else(|| err(format!("view {view} out of range")))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn near(&self) -> f64 {
        self.inner.near
    }

    #[getter]
    fn far(&self) -> f64 {
        self.inner.far
    }

    #[getter]
    fn split(&self) -> &'static str {
        self.inner.split.name()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Adam training state around a model.
#[pyclass(name = "Trainer", module = "able_nerf")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model_config = None, train_config = None))]
    fn new(model_config: Option<&Bound<'_, PyDict>>, train_config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let m = config_from(ModelConfig::default(), model_config)?;
        let t = config_from(TrainConfig::default(), train_config)?;
        Ok(Self { inner: Trainer::new(m, t).map_err(err)? })
    }

    /// Resumes from a checkpoint written by `save`.
    #[staticmethod]
    #[pyo3(signature = (path, train_config = None))]
    fn load(path: PathBuf, train_config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let t = config_from(TrainConfig::default(), train_config)?;
        Ok(Self { inner: Trainer::from_checkpoint(&ck, t).map_err(err)? })
    }

    /// One optimisation step; returns loss, psnr, lr and grad_norm.
    fn step<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let inner = &mut self.inner;
        let s = py.detach(|| inner.step(&dataset.inner)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("loss", s.loss)?;
        d.set_item("psnr", s.psnr)?;
        d.set_item("lr", s.lr)?;
        d.set_item("grad_norm", s.grad_norm)?;
        Ok(d)
    }

    /// Runs to the configured iteration count; returns `(iter, loss, psnr, lr)` rows.
    fn train(&mut self, py: Python<'_>, dataset: &PyDataset) -> PyResult<Vec<(u64, f64, f64, f64)>> {
        let inner = &mut self.inner;
        let rows = py.detach(|| trainer::train(inner, &dataset.inner, None)).map_err(err)?;
        Ok(rows.iter().map(|r| (r.iter, r.loss, r.psnr, r.lr)).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(err)
    }

    #[getter]
    fn iter(&self) -> u64 {
        self.inner.iter
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel { inner: self.inner.model.clone() }
    }

    #[getter]
    fn train_config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        config_dict(py, &self.inner.cfg)
    }
}

#[pyfunction]
fn default_model_config(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    config_dict(py, &ModelConfig::default())
}

#[pyfunction]
fn tiny_model_config(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    config_dict(py, &ModelConfig::tiny())
}

#[pyfunction]
fn default_train_config(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    config_dict(py, &TrainConfig::default())
}

/// Learning rate at `iter` under a training config.
#[pyfunction]
#[pyo3(signature = (iter, train_config = None))]
fn lr_at(iter: u64, train_config: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
    Ok(trainer::lr_at(iter, &config_from(TrainConfig::default(), train_config)?))
}

#[pyfunction]
fn psnr(a: Rows, b: Rows) -> PyResult<f64> {
    evalviz::psnr(&from_rows(a)?, &from_rows(b)?).map_err(err)
}

#[pyfunction]
fn ssim(a: Rows, b: Rows) -> PyResult<f64> {
    evalviz::ssim(&from_rows(a)?, &from_rows(b)?).map_err(err)
}

#[pyfunction]
fn tone_map(direct: [f64; 3], viewdep: [f64; 3]) -> PyResult<[f64; 3]> {
    model::tone_map(direct, viewdep).map_err(err)
}

/// Alpha compositing of samples; returns `(rgb, weights)`.
#[pyfunction]
fn volume_render(sigmas: Vec<f64>, deltas: Vec<f64>, colours: Vec<[f64; 3]>) -> PyResult<([f64; 3], Vec<f64>)> {
    if sigmas.len() != deltas.len() || sigmas.len() != colours.len() {
        return Err(err("sigmas, deltas and colours differ in length"));
    }
    let pts: Vec<PointRadiance> = sigmas.iter().zip(&deltas).zip(&colours).map(|((&s, &d), &c)| PointRadiance::new(s, d, c)).collect();
    Ok((vr_oracle::composite(&pts).map_err(err)?, vr_oracle::weights(&pts).map_err(err)?))
}

#[pymodule]
fn able_nerf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(default_model_config, m)?)?;
    m.add_function(wrap_pyfunction!(tiny_model_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(tone_map, m)?)?;
    m.add_function(wrap_pyfunction!(volume_render, m)?)?;
    Ok(())
}
