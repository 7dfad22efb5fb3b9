//! Python bindings: scenes, ray parameterization, trained networks and the
//! end-to-end pipeline.

#![allow(clippy::type_complexity)]

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use raydf::cli::{self, Stage, Sweep};
use raydf::config::RunConfig;
use raydf::geometry::{BoundingSphere, Vec3};
use raydf::model::Architecture;

create_exception!(raydf_py, RaydfError, PyException);

fn to_py(err: raydf::Error) -> PyErr {
    match err {
        raydf::Error::Config(msg) => PyValueError::new_err(msg),
        e @ raydf::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => RaydfError::new_err(e.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::from(v)
}

fn tuple3(v: &Vec3) -> (f64, f64, f64) {
    (v.x, v.y, v.z)
}

/// An analytic scene from the built-in catalog.
#[pyclass(module = "raydf_py")]
struct Scene {
    inner: raydf::scene::Scene,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (name="sphere", diameter=3.0))]
    fn new(name: &str, diameter: f64) -> PyResult<Self> {
        Ok(Self {
            inner: raydf::scene::Scene::catalog(name, diameter).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn catalog() -> Vec<&'static str> {
        raydf::scene::Scene::CATALOG.to_vec()
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.inner.bounding.diameter
    }

    /// First hit along a ray as `(t, point, normal)`, or None.
    fn cast(&self, origin: [f64; 3], direction: [f64; 3]) -> Option<(f64, (f64, f64, f64), (f64, f64, f64))> {
        let dir = vec3(direction).normalize();
        self.inner
            .cast_ray(&vec3(origin), &dir)
            .map(|h| (h.t, tuple3(&h.point), tuple3(&h.normal)))
    }

    fn sample_surface(&self, count: usize, seed: u64) -> Vec<(f64, f64, f64)> {
        raydf::scene::sample_surface(&self.inner, count, seed).iter().map(tuple3).collect()
    }
}

/// Two-sphere parameterization of a ray: `((θin, φin, θout, φout), d0)`.
#[pyfunction]
#[pyo3(signature = (origin, direction, diameter, center=[0.0, 0.0, 0.0]))]
fn parameterize_ray(origin: [f64; 3], direction: [f64; 3], diameter: f64, center: [f64; 3]) -> PyResult<([f64; 4], f64)> {
    let sphere = BoundingSphere::new(vec3(center), diameter).map_err(to_py)?;
    let (ray, d0) = raydf::geometry::parameterize_ray(&vec3(origin), &vec3(direction), &sphere).map_err(to_py)?;
    Ok((ray.to_array(), d0))
}

/// Network-input scaling of a parameterized ray.
#[pyfunction]
fn normalize_ray(ray: [f64; 4]) -> PyResult<[f64; 4]> {
    let r = raydf::geometry::Ray::from_array(ray);
    Ok(raydf::dataset::normalize_ray(&r).map_err(to_py)?.0)
}

fn rows<const N: usize>(data: &[[f64; N]]) -> Array2<f32> {
    Array2::from_shape_fn((data.len(), N), |(r, c)| data[r][c] as f32)
}

/// A ray-surface distance network.
#[pyclass(module = "raydf_py")]
struct DistanceField {
    inner: raydf::model::DistanceField,
}

#[pymethods]
impl DistanceField {
    #[new]
    #[pyo3(signature = (hidden=256, layers=5, omega=30.0, radiance=false, seed=0))]
    fn new(hidden: usize, layers: usize, omega: f32, radiance: bool, seed: u64) -> PyResult<Self> {
        let arch = Architecture { hidden, layers, omega };
        Ok(Self {
            inner: raydf::model::DistanceField::new(arch, radiance, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: raydf::model::DistanceField::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(to_py)
    }

    /// Normalized distances for normalized rays.
    fn predict(&self, py: Python<'_>, rays: Vec<[f64; 4]>) -> PyResult<Vec<f32>> {
        let x = rows(&rays);
        let out = py.detach(|| self.inner.forward(x.view())).map_err(to_py)?;
        Ok(out.distance.iter().copied().collect())
    }

    /// Rows evaluated since construction.
    #[getter]
    fn evaluations(&self) -> u64 {
        self.inner.evaluations()
    }
}

/// The dual-ray visibility classifier.
#[pyclass(module = "raydf_py")]
struct Classifier {
    inner: raydf::model::Classifier,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (hidden=128, layers=4, omega=30.0, seed=0))]
    fn new(hidden: usize, layers: usize, omega: f32, seed: u64) -> PyResult<Self> {
        let arch = Architecture { hidden, layers, omega };
        Ok(Self {
            inner: raydf::model::Classifier::new(arch, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: raydf::model::Classifier::load(&path).map_err(to_py)?,
        })
    }

    /// Visibility scores in [0, 1] for normalized ray pairs and points.
    fn score(&self, ray1: Vec<[f64; 4]>, ray2: Vec<[f64; 4]>, points: Vec<[f64; 3]>) -> PyResult<Vec<f32>> {
        let out = self
            .inner
            .forward(rows(&ray1).view(), rows(&ray2).view(), rows(&points).view())
            .map_err(to_py)?;
        Ok(out.iter().copied().collect())
    }
}

/// Symmetric chamfer distance `(mean, median)` of squared NN distances.
#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<(f64, f64)> {
    let a: Vec<Vec3> = a.into_iter().map(vec3).collect();
    let b: Vec<Vec3> = b.into_iter().map(vec3).collect();
    let c = raydf::eval::chamfer(&a, &b).map_err(to_py)?;
    Ok((c.mean, c.median))
}

/// Mean absolute distance error over masked entries, centimeters.
#[pyfunction]
fn ade(pred: Vec<f64>, gt: Vec<f64>, mask: Vec<bool>) -> PyResult<f64> {
    raydf::eval::ade(&pred, &gt, &mask).map_err(to_py)
}

fn report_dict(r: &raydf::eval::MetricReport) -> HashMap<&'static str, Option<f64>> {
    HashMap::from([
        ("ade_cm", r.ade_cm),
        ("cd_mean_e3", r.cd_mean),
        ("cd_median_e3", r.cd_median),
        ("accuracy", r.accuracy),
        ("f1", r.f1),
    ])
}

/// The command-line pipeline driven from Python. Each step returns the text
/// the corresponding `raydf` command would print.
#[pyclass(module = "raydf_py")]
struct Pipeline {
    config: RunConfig,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config=None, toml=None, out=None, seed=None))]
    fn new(config: Option<PathBuf>, toml: Option<&str>, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match (config, toml) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("pass either config or toml, not both")),
            (Some(path), None) => RunConfig::load(&path).map_err(to_py)?,
            (None, Some(text)) => RunConfig::from_toml(text).map_err(to_py)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(out) = out {
            cfg.out = out;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(to_py)?;
        Ok(Self { config: cfg })
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.config.to_toml()
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.config.out.clone()
    }

    fn generate(&self, py: Python<'_>) -> PyResult<String> {
        let mut buf = Vec::new();
        py.detach(|| cli::cmd_generate(&self.config, &mut buf)).map_err(to_py)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    #[pyo3(signature = (stage="both", checkpoint=None))]
    fn train(&self, py: Python<'_>, stage: &str, checkpoint: Option<PathBuf>) -> PyResult<String> {
        let stage: Stage = stage.parse().map_err(PyValueError::new_err)?;
        let mut buf = Vec::new();
        py.detach(|| cli::cmd_train(&self.config, stage, checkpoint.as_deref(), &mut buf))
            .map_err(to_py)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    #[pyo3(signature = (checkpoint=None))]
    fn render(&self, py: Python<'_>, checkpoint: Option<PathBuf>) -> PyResult<String> {
        let mut buf = Vec::new();
        py.detach(|| cli::cmd_render(&self.config, checkpoint.as_deref(), &mut buf))
            .map_err(to_py)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    #[pyo3(signature = (checkpoint=None, rasters=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        checkpoint: Option<PathBuf>,
        rasters: Option<PathBuf>,
    ) -> PyResult<HashMap<&'static str, Option<f64>>> {
        let mut sink = std::io::sink();
        let report = py
            .detach(|| cli::cmd_eval(&self.config, checkpoint.as_deref(), rasters.as_deref(), &mut sink))
            .map_err(to_py)?;
        Ok(report_dict(&report))
    }

    /// Rows of `(label, metrics, training seconds)`.
    fn ablate(&self, py: Python<'_>, sweep: &str) -> PyResult<Vec<(String, HashMap<&'static str, Option<f64>>, f64)>> {
        let sweep: Sweep = sweep.parse().map_err(PyValueError::new_err)?;
        let mut sink = std::io::sink();
        let rows = py
            .detach(|| cli::cmd_ablate(&self.config, &sweep, &mut sink))
            .map_err(to_py)?;
        Ok(rows.iter().map(|r| (r.label.clone(), report_dict(&r.report), r.seconds)).collect())
    }
}

#[pymodule]
fn raydf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RaydfError", m.py().get_type::<RaydfError>())?;
    m.add_class::<Scene>()?;
    m.add_class::<DistanceField>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(parameterize_ray, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_ray, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    Ok(())
}
