//! Python bindings: embedding sets, MACE, bootstrap tests, detection
//! evaluation, projections and the synthetic generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mace_core::deteval::{self, FilterConfig, MatchConfig};
use mace_core::ingest::{self, ParseMode};
use mace_core::mace::{self, GroupedEmbeddings};
use mace_core::project::{self, TsneConfig};
use mace_core::stats::{self, BootstrapConfig};
use mace_core::synth::{self, SynthScenario};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ingest_err(e: ingest::IngestError) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        value_err(e)
    }
}

#[pyclass(name = "EmbeddingSet", module = "mace_py", from_py_object)]
#[derive(Clone)]
pub struct PyEmbeddingSet {
    inner: ingest::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    /// Builds a set from a list of equal-length rows.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: ingest::EmbeddingSet::from_rows(&rows).map_err(ingest_err)?,
        })
    }

    /// Reads a `.bin` file and its `.keys.jsonl` sidecar when present.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let keys = path.with_extension("keys.jsonl");
        let keys = keys.is_file().then_some(keys);
        Ok(Self {
            inner: ingest::read_embedding_set(&path, keys.as_deref(), ParseMode::Lenient)
                .map_err(ingest_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: ingest::parse_embeddings(data).map_err(ingest_err)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        ingest::write_embeddings(&self.inner)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner
            .matrix()
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingSet(n={}, d={})", self.inner.n(), self.inner.d())
    }
}

#[pyclass(name = "TestResult", module = "mace_py", get_all, skip_from_py_object)]
pub struct PyTestResult {
    kind: String,
    statistic: f64,
    p_value: f64,
    p_display: String,
    ci: (f64, f64),
    level: f64,
    decision: String,
    margin: Option<f64>,
    n_samples: usize,
}

#[pymethods]
impl PyTestResult {
    #[getter]
    fn rejected(&self) -> bool {
        self.decision == "Reject"
    }

    fn __repr__(&self) -> String {
        format!(
            "TestResult(kind={}, statistic={}, p={}, decision={})",
            self.kind, self.statistic, self.p_display, self.decision
        )
    }
}

impl From<stats::TestResult> for PyTestResult {
    fn from(t: stats::TestResult) -> Self {
        Self {
            kind: format!("{:?}", t.kind),
            statistic: t.statistic,
            p_value: t.p_value,
            p_display: t.p_display,
            ci: t.ci,
            level: t.level,
            decision: format!("{:?}", t.decision),
            margin: t.margin,
            n_samples: t.n_samples,
        }
    }
}

/// Squared Fréchet distance between Gaussian fits of two sets.
#[pyfunction]
fn mace_distance(a: &PyEmbeddingSet, b: &PyEmbeddingSet) -> PyResult<f64> {
    mace::mace_between(&a.inner, &b.inner)
        .map(|s| s.value)
        .map_err(value_err)
}

/// Bootstrap distribution of MACE(a, b), resampling videos (or rows when
/// the sets carry no frame keys).
#[pyfunction]
#[pyo3(signature = (a, b, resamples = 1000, seed = 17))]
fn mace_bootstrap(
    py: Python<'_>,
    a: &PyEmbeddingSet,
    b: &PyEmbeddingSet,
    resamples: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let (ga, gb) = (GroupedEmbeddings::by_video(&a.inner), GroupedEmbeddings::by_video(&b.inner));
    let cfg = BootstrapConfig::new(resamples, seed);
    py.detach(|| mace::mace_bootstrap(&ga, &gb, &cfg, 1))
        .map(|d| d.values)
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (samples, level = 0.95))]
fn percentile_ci(samples: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    stats::percentile_ci(&samples, level).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, level = 0.95))]
fn z_test(a: Vec<f64>, b: Vec<f64>, level: f64) -> PyResult<PyTestResult> {
    stats::z_test_two_sided(&a, &b, level)
        .map(Into::into)
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (delta, level = 0.95))]
fn superiority(delta: Vec<f64>, level: f64) -> PyResult<PyTestResult> {
    stats::superiority_one_sided(&delta, level)
        .map(Into::into)
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (delta, margin = 0.015, level = 0.95))]
fn non_inferiority(delta: Vec<f64>, margin: f64, level: f64) -> PyResult<PyTestResult> {
    stats::non_inferiority(&delta, margin, level)
        .map(Into::into)
        .map_err(value_err)
}

/// Majority vote of `votes` out of a centred `window`.
#[pyfunction]
#[pyo3(signature = (stream, window = 7, votes = 4))]
fn median_filter(stream: Vec<bool>, window: usize, votes: usize) -> PyResult<Vec<bool>> {
    let cfg = FilterConfig::new(window, votes, 0.5).map_err(value_err)?;
    Ok(deteval::median_filter(&stream, &cfg))
}

#[pyclass(name = "Bundle", module = "mace_py", skip_from_py_object)]
pub struct PyBundle {
    inner: ingest::DatasetBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    #[pyo3(signature = (path, strict = false))]
    fn load(path: PathBuf, strict: bool) -> PyResult<Self> {
        let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
        Ok(Self {
            inner: ingest::load_bundle_dir(&path, mode).map_err(ingest_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        ingest::write_bundle_dir(&self.inner, &path).map_err(ingest_err)
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner.video_ids()
    }

    #[getter]
    fn n_polyps(&self) -> usize {
        self.inner.tracks().len()
    }

    /// `(tpr, fapm)` under one filter configuration.
    #[pyo3(signature = (window = 7, votes = 4, threshold = 0.5, iou = 0.2))]
    fn evaluate(&self, window: usize, votes: usize, threshold: f64, iou: f64) -> PyResult<(f64, f64)> {
        let f = FilterConfig::new(window, votes, threshold).map_err(value_err)?;
        let m = MatchConfig::new(iou).map_err(value_err)?;
        let p = deteval::dataset_tpr_fapm(&self.inner, &self.inner.video_ids(), &f, &m)
            .map_err(value_err)?;
        Ok((p.tpr, p.fapm))
    }

    /// Envelope of the default sweep as `[(fapm, tpr), ...]`.
    #[pyo3(signature = (window = 7, steps = 50, iou = 0.2))]
    fn curve(&self, py: Python<'_>, window: usize, steps: usize, iou: f64) -> PyResult<Vec<(f64, f64)>> {
        let m = MatchConfig::new(iou).map_err(value_err)?;
        let sweep = deteval::default_sweep(window, steps);
        let ids = self.inner.video_ids();
        let c = py
            .detach(|| deteval::build_curve(&self.inner, &ids, &sweep, &m))
            .map_err(value_err)?;
        Ok(c.points().iter().map(|p| (p.fapm, p.tpr)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(videos={}, frames={}, polyps={})",
            self.inner.videos().len(),
            self.inner.frames().len(),
            self.inner.tracks().len()
        )
    }
}

/// TPR at a FAPM value on a curve given as `[(fapm, tpr), ...]`.
#[pyfunction]
fn tpr_at_fapm(points: Vec<(f64, f64)>, fapm: f64) -> PyResult<f64> {
    let pts: Vec<deteval::CurvePoint> = points
        .into_iter()
        .map(|(fapm, tpr)| deteval::CurvePoint { fapm, tpr })
        .collect();
    deteval::Curve::envelope(&pts)
        .tpr_at_fapm(fapm)
        .map(|i| i.tpr)
        .map_err(value_err)
}

#[pyfunction]
fn pca_2d(set: &PyEmbeddingSet) -> PyResult<Vec<(f64, f64)>> {
    let labels = vec![String::new(); set.inner.n()];
    let p = project::pca_2d(&set.inner, &labels).map_err(value_err)?;
    Ok(p.coords.iter().map(|c| (c[0], c[1])).collect())
}

/// Exact t-SNE; returns `(coords, initial_kl, final_kl)`.
#[pyfunction]
#[pyo3(signature = (set, perplexity = 30.0, iterations = 1000, seed = 17))]
fn tsne_2d(
    py: Python<'_>,
    set: &PyEmbeddingSet,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<(f64, f64)>, f64, f64)> {
    let labels = vec![String::new(); set.inner.n()];
    let cfg = TsneConfig {
        perplexity,
        iterations,
        seed,
        ..TsneConfig::default()
    };
    let r = py
        .detach(|| project::tsne_2d(&set.inner, &labels, &cfg))
        .map_err(value_err)?;
    Ok((
        r.projection.coords.iter().map(|c| (c[0], c[1])).collect(),
        r.initial_kl,
        r.final_kl,
    ))
}

/// Writes a synthetic artifact tree from a JSON scenario string.
#[pyfunction]
#[pyo3(signature = (scenario_json, out, seed = 17))]
fn synth_tree(py: Python<'_>, scenario_json: &str, out: PathBuf, seed: u64) -> PyResult<()> {
    let sc = SynthScenario::from_json(scenario_json)
        .map_err(value_err)?
        .with_default_seed(seed);
    py.detach(|| synth::write_synth_tree(&sc, &out)).map_err(value_err)
}

#[pymodule]
fn mace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyTestResult>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(mace_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mace_bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(percentile_ci, m)?)?;
    m.add_function(wrap_pyfunction!(z_test, m)?)?;
    m.add_function(wrap_pyfunction!(superiority, m)?)?;
    m.add_function(wrap_pyfunction!(non_inferiority, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(tpr_at_fapm, m)?)?;
    m.add_function(wrap_pyfunction!(pca_2d, m)?)?;
    m.add_function(wrap_pyfunction!(tsne_2d, m)?)?;
    m.add_function(wrap_pyfunction!(synth_tree, m)?)?;
    Ok(())
}
