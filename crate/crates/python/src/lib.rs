//! Python bindings: models, localizability graphs, dominating sets, synthetic
//! scenes, evaluation and the pose metrics.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sfm_domset::cli::{load_model, CliError, RunConfig};
use sfm_domset::domgraph::{self, LocalizabilityGraph};
use sfm_domset::eval::evaluate;
use sfm_domset::geometry;
use sfm_domset::model::save_native;
use sfm_domset::synth::{generate_scene, load_queries, scene_to_native_files};
use sfm_domset::{Bbox3, BboxPolicy, ImageId, Pose, SfmModel};

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Io { .. } => PyOSError::new_err(e.to_string()),
        CliError::Validation(_) => PyValueError::new_err(e.to_string()),
        CliError::Internal(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    let c = match json {
        Some(text) => RunConfig::from_json(text).map_err(cli_err)?,
        None => RunConfig::default(),
    };
    c.validate().map_err(cli_err)?;
    Ok(c)
}

/// A sparse reconstruction.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    inner: SfmModel,
}

#[pymethods]
impl PyModel {
    /// Loads `model.json`, a native JSON file, or a directory of reconstruction text files.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path, None).map_err(cli_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_native(&self.inner, path).map_err(|e| PyOSError::new_err(e.to_string()))
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.num_images()
    }

    #[getter]
    fn num_points(&self) -> usize {
        self.inner.num_points()
    }

    fn image_ids(&self) -> Vec<ImageId> {
        self.inner.image_ids()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Keeps the points observed by `members`.
    #[pyo3(signature = (members, recompute_bbox = false))]
    fn filter(&self, members: BTreeSet<ImageId>, recompute_bbox: bool) -> PyResult<Self> {
        let policy = if recompute_bbox {
            BboxPolicy::Recompute
        } else {
            BboxPolicy::Keep
        };
        Ok(Self {
            inner: self
                .inner
                .filter_by_dominating_set(&members, policy)
                .map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(images={}, points={})",
            self.inner.num_images(),
            self.inner.num_points()
        )
    }
}

/// Directed localizability graph over image ids.
#[pyclass(name = "Graph", frozen)]
pub struct PyGraph {
    inner: LocalizabilityGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (nodes, edges = Vec::new()))]
    fn new(nodes: Vec<ImageId>, edges: Vec<(ImageId, ImageId)>) -> PyResult<Self> {
        let mut g = LocalizabilityGraph::new(nodes).map_err(value_err)?;
        for (a, b) in edges {
            g.add_edge(a, b, 0.0).map_err(value_err)?;
        }
        Ok(Self { inner: g })
    }

    /// Graph with both directions of every pair.
    #[staticmethod]
    fn undirected(nodes: Vec<ImageId>, pairs: Vec<(ImageId, ImageId)>) -> PyResult<Self> {
        Ok(Self {
            inner: LocalizabilityGraph::from_undirected(nodes, &pairs).map_err(value_err)?,
        })
    }

    #[getter]
    fn nodes(&self) -> Vec<ImageId> {
        self.inner.nodes().to_vec()
    }

    /// `(from, to, error_ratio)` triples.
    fn edges(&self) -> Vec<(ImageId, ImageId, f64)> {
        self.inner.edges().map(|e| (e.from, e.to, e.error_ratio)).collect()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn is_dominating(&self, candidate: BTreeSet<ImageId>) -> PyResult<bool> {
        domgraph::is_dominating(&self.inner, &candidate).map_err(value_err)
    }

    /// Smallest set over `iterations` seeded greedy passes, with the pass that found it.
    #[pyo3(signature = (iterations = 1000, seed = 0))]
    fn best_dominating_set(&self, iterations: usize, seed: u64) -> PyResult<(BTreeSet<ImageId>, usize)> {
        let d = domgraph::best_dominating_set(&self.inner, iterations, seed).map_err(value_err)?;
        Ok((d.members, d.best_iteration))
    }

    fn exact_min_dominating_set(&self) -> PyResult<BTreeSet<ImageId>> {
        domgraph::exact_min_dominating_set(&self.inner).map_err(value_err)
    }

    /// `count` random same-size samples, reproducible from `seed`.
    #[pyo3(signature = (k, count = 1, seed = 0))]
    fn random_samples(&self, k: usize, count: usize, seed: u64) -> PyResult<Vec<BTreeSet<ImageId>>> {
        domgraph::random_baseline_samples(&self.inner, k, count, seed).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={})",
            self.inner.nodes().len(),
            self.inner.num_edges()
        )
    }
}

/// Builds the localizability graph of `model` under a JSON run config.
#[pyfunction]
#[pyo3(signature = (model, config_json = None))]
fn build_graph(py: Python<'_>, model: &PyModel, config_json: Option<&str>) -> PyResult<PyGraph> {
    let c = config(config_json)?;
    let provider = c.provider.build().map_err(value_err)?;
    let build = py
        .detach(|| {
            domgraph::build_graph(
                &model.inner,
                provider.as_ref(),
                &c.estimator,
                c.threshold,
                c.edge_metric,
            )
        })
        .map_err(value_err)?;
    Ok(PyGraph { inner: build.graph })
}

/// Generates the scene described by the config's `synth` section into `out_dir`
/// and returns its model.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn synth_scene(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<PyModel> {
    let c = config(config_json)?;
    let scene = generate_scene(&c.synth).map_err(value_err)?;
    scene_to_native_files(&scene, &out_dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
    Ok(PyModel { inner: scene.model })
}

/// Localizes the queries in `queries_path` against `model`; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, queries_path, config_json = None, name = "model"))]
fn evaluate_queries(
    py: Python<'_>,
    model: &PyModel,
    queries_path: PathBuf,
    config_json: Option<&str>,
    name: &str,
) -> PyResult<String> {
    let c = config(config_json)?;
    let queries = load_queries(&queries_path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    let provider = c.provider.build().map_err(value_err)?;
    let report = py
        .detach(|| {
            evaluate(
                name,
                &model.inner,
                &queries,
                provider.as_ref(),
                &c.estimator,
                c.unit_scale,
            )
        })
        .map_err(value_err)?;
    Ok(report.to_json())
}

type Mat3 = [[f64; 3]; 3];

fn matrix(m: Mat3) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::from_fn(|r, c| m[r][c])
}

fn pose(r: Mat3, t: [f64; 3]) -> PyResult<Pose> {
    Pose::new(matrix(r), t.into()).map_err(value_err)
}

/// Rotation angle between two rotation matrices, in radians.
#[pyfunction]
fn geodesic_error(r_gt: Mat3, r_hat: Mat3) -> f64 {
    geometry::geodesic_error(&matrix(r_gt), &matrix(r_hat))
}

#[pyfunction]
fn loc_error(t_gt: [f64; 3], t_hat: [f64; 3]) -> f64 {
    geometry::loc_error(&t_gt.into(), &t_hat.into())
}

/// Mean bbox-corner displacement over the bbox diagonal.
#[pyfunction]
fn bbox_add_error(
    r_gt: Mat3,
    t_gt: [f64; 3],
    r_hat: Mat3,
    t_hat: [f64; 3],
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
) -> PyResult<f64> {
    let bbox = Bbox3::new(bbox_min.into(), bbox_max.into()).map_err(value_err)?;
    Ok(geometry::bbox_add_error(
        &pose(r_gt, t_gt)?,
        &pose(r_hat, t_hat)?,
        &bbox,
    ))
}

#[pymodule]
#[pyo3(name = "sfm_domset")]
fn sfm_domset_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_queries, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_error, m)?)?;
    m.add_function(wrap_pyfunction!(loc_error, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_add_error, m)?)?;
    Ok(())
}
