//! Python bindings: scenes, feature maps, memories, and the inference stages.
//!
//! Structured results cross the boundary as plain dicts built from the same
//! JSON the command line tool writes.

use std::path::PathBuf;

use afford_core::features::{best_match, PixelMask};
use afford_core::formats::{load_embedding, load_feature_map, load_mask};
use afford_core::geometry::{project, unproject};
use afford_core::lift::cluster_normals;
use afford_core::memory::{load_memory, MANIFEST_FILE};
use afford_core::pipeline::{self, QueryEmbeddings};
use afford_core::retrieval::imd;
use afford_core::transfer::ransac_line;
use afford_core::{Affordance2D, DenseFeatureMap, PipelineConfig};
use nalgebra::{Point2, Point3, UnitVector3, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(afford, AffordError, PyException);

fn err(e: afford_core::Error) -> PyErr {
    AffordError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn config(path: Option<PathBuf>) -> PyResult<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(err),
        None => Ok(PipelineConfig::default()),
    }
}

#[pyclass(name = "CameraIntrinsics", module = "afford", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(afford_core::CameraIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        afford_core::CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn project(&self, x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
        let p = project(&Point3::new(x, y, z), &self.0).map_err(err)?;
        Ok((p.x, p.y))
    }

    fn unproject(&self, u: f64, v: f64, z: f64) -> (f64, f64, f64) {
        let p = unproject(u, v, z, &self.0);
        (p.x, p.y, p.z)
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!(
            "CameraIntrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    }
}

/// Dense per-cell features, L2-normalized on load.
#[pyclass(name = "FeatureMap", module = "afford", frozen)]
struct PyFeatureMap(DenseFeatureMap);

#[pymethods]
impl PyFeatureMap {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let map = load_feature_map(path).map_err(err)?;
        let map = if map.normalized {
            map
        } else {
            afford_core::features::normalize_features(map).0
        };
        Ok(Self(map))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.grid_height, self.0.grid_width, self.0.channels)
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.0.image_width, self.0.image_height)
    }

    fn cell(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        if row >= self.0.grid_height || col >= self.0.grid_width {
            return Err(PyValueError::new_err(format!("cell ({row}, {col}) is outside the grid")));
        }
        Ok(self.0.cell(row, col).to_vec())
    }

    /// `(row, col, u, v, score)` of the cell most similar to `query`.
    #[pyo3(signature = (query, mask_path=None))]
    fn best_match(&self, query: Vec<f32>, mask_path: Option<PathBuf>) -> PyResult<(usize, usize, f64, f64, f64)> {
        let mask: Option<PixelMask> = mask_path.map(load_mask).transpose().map_err(err)?;
        let m = best_match(&query, &self.0, mask.as_ref()).map_err(err)?;
        Ok((m.row, m.col, m.pixel.x, m.pixel.y, m.score))
    }

    /// Instance matching distance from this map to `target`.
    fn imd(&self, target: &PyFeatureMap) -> PyResult<f64> {
        imd(&self.0, None, &target.0, None).map_err(err)
    }
}

#[pyclass(name = "Memory", module = "afford", frozen)]
struct PyMemory {
    dir: PathBuf,
    inner: afford_core::AffordanceMemory,
}

#[pymethods]
impl PyMemory {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = load_memory(dir.join(MANIFEST_FILE)).map_err(err)?;
        Ok(Self { dir, inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.entries().iter().map(|e| e.id.clone()).collect()
    }

    fn tasks(&self) -> Vec<String> {
        self.inner.task_index().keys().cloned().collect()
    }

    fn entry<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyAny>> {
        let e = self
            .inner
            .entry(id)
            .ok_or_else(|| err(afford_core::Error::UnknownEntry(id.to_string())))?;
        to_py(py, e)
    }

    fn __repr__(&self) -> String {
        format!("Memory({:?}, entries={})", self.dir, self.inner.len())
    }
}

#[pyclass(name = "Scene", module = "afford", frozen)]
struct PyScene(afford_core::Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        afford_core::SceneBundle::load(path).map(Self).map_err(err)
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics(self.0.intrinsics)
    }

    #[getter]
    fn features(&self) -> PyFeatureMap {
        PyFeatureMap(self.0.feature_map.clone())
    }
}

/// Two-point RANSAC line fit. Returns the unit direction and inlier flags.
#[pyfunction]
#[pyo3(signature = (points, iterations=256, inlier_tol=3.0, seed=0))]
fn fit_line(points: Vec<(f64, f64)>, iterations: usize, inlier_tol: f64, seed: u64) -> PyResult<((f64, f64), Vec<bool>)> {
    let pts: Vec<Point2<f64>> = points.iter().map(|&(x, y)| Point2::new(x, y)).collect();
    let fit = ransac_line(&pts, iterations, inlier_tol, seed).map_err(err)?;
    Ok(((fit.direction.x, fit.direction.y), fit.inliers))
}

/// K-Means over unit normals; `(center, count)` pairs, largest first.
#[pyfunction]
#[pyo3(signature = (normals, k=4, seed=0))]
fn cluster(normals: Vec<(f64, f64, f64)>, k: usize, seed: u64) -> Vec<((f64, f64, f64), usize)> {
    let units: Vec<UnitVector3<f64>> = normals
        .iter()
        .map(|&(x, y, z)| UnitVector3::new_normalize(Vector3::new(x, y, z)))
        .collect();
    cluster_normals(&units, k, seed)
        .into_iter()
        .map(|c| ((c.center.x, c.center.y, c.center.z), c.count))
        .collect()
}

fn query_embeddings(instruction: PathBuf, object: PathBuf) -> PyResult<(afford_core::Embedding, afford_core::Embedding)> {
    Ok((load_embedding(instruction).map_err(err)?, load_embedding(object).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (memory, scene, instruction, object, fallback_tasks=Vec::new(), config_path=None))]
fn retrieve<'py>(
    py: Python<'py>,
    memory: &PyMemory,
    scene: &PyScene,
    instruction: PathBuf,
    object: PathBuf,
    fallback_tasks: Vec<String>,
    config_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path)?;
    let (i, o) = query_embeddings(instruction, object)?;
    let q = QueryEmbeddings { instruction: &i, object_name: &o };
    let report = pipeline::retrieve_stage(&scene.0, &memory.inner, &memory.inner, q, &fallback_tasks, &cfg).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (memory, scene, entry_id, config_path=None))]
fn transfer<'py>(
    py: Python<'py>,
    memory: &PyMemory,
    scene: &PyScene,
    entry_id: &str,
    config_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path)?;
    let a = pipeline::transfer_stage(&scene.0, &memory.inner, &memory.inner, entry_id, &cfg).map_err(err)?;
    to_py(py, &a)
}

#[pyfunction]
#[pyo3(signature = (scene, affordance2d, config_path=None))]
fn lift<'py>(
    py: Python<'py>,
    scene: &PyScene,
    affordance2d: &Bound<'py, PyAny>,
    config_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path)?;
    let a: Affordance2D = from_py(py, affordance2d)?;
    a.validate().map_err(err)?;
    let out = pipeline::lift_stage(&scene.0, &a, &cfg).map_err(err)?;
    to_py(py, &out)
}

/// Retrieval, transfer, and lifting in one call.
#[pyfunction]
#[pyo3(signature = (memory, scene, instruction, object, fallback_tasks=Vec::new(), config_path=None))]
fn infer<'py>(
    py: Python<'py>,
    memory: &PyMemory,
    scene: &PyScene,
    instruction: PathBuf,
    object: PathBuf,
    fallback_tasks: Vec<String>,
    config_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path)?;
    let (i, o) = query_embeddings(instruction, object)?;
    let q = QueryEmbeddings { instruction: &i, object_name: &o };
    let out = pipeline::infer(&scene.0, &memory.inner, &memory.inner, q, &fallback_tasks, None, &cfg).map_err(err)?;
    to_py(py, &out)
}

/// Writes a synthetic memory, scene, and query under `dir` and returns their
/// paths along with the ground truth.
#[pyfunction]
#[pyo3(signature = (dir, entries=20, tasks=4, seed=0))]
fn write_demo<'py>(py: Python<'py>, dir: PathBuf, entries: usize, tasks: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let spec = afford_core::demo::DemoSpec {
        entries,
        tasks,
        seed,
        ..Default::default()
    };
    let (paths, truth) = afford_core::demo::write_demo(&spec, &dir).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("memory", paths.memory_dir)?;
    d.set_item("scene", paths.scene)?;
    d.set_item("instruction", paths.instruction)?;
    d.set_item("object", paths.object)?;
    d.set_item("truth", to_py(py, &truth)?)?;
    Ok(d)
}

#[pymodule]
fn afford(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AffordError", m.py().get_type::<AffordError>())?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyMemory>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(fit_line, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(write_demo, m)?)?;
    Ok(())
}
