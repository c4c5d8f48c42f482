//! Python bindings for the `misapp` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

use misapp::graphs::build_graphs;
use misapp::ingest::{format_annotations, format_events, format_poi, synth_generate, PredictionInstance, SplitMode, PAD};
use misapp::interpret::kendall_tau as kendall;
use misapp::model::{trace_json, Misapp, ModelConfig};
use misapp::pipeline::{self, ExplainConfig, PreprocessConfig, SplitData};
use misapp::train_eval::{fit, MrrMode, TrainConfig};

fn err(e: misapp::Error) -> PyErr {
    match e {
        misapp::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>, what: &str) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("{what}: {e}"))),
        None => Ok(T::default()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => PyString::new(py, &n.to_string()).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn split_mode(s: &str) -> PyResult<SplitMode> {
    s.parse().map_err(err)
}

/// Generates a synthetic log; returns the event, annotation and POI CSV text.
#[pyfunction]
#[pyo3(signature = (config_json, seed=0))]
fn synth<'py>(py: Python<'py>, config_json: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("synth config: {e}")))?;
    let out = synth_generate(&cfg, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("events", format_events(&out.events))?;
    d.set_item("annotations", format_annotations(&out.annotations))?;
    d.set_item("poi", format_poi(&out.poi))?;
    Ok(d)
}

/// A prepared split: instances, vocabulary and category count.
#[pyclass(module = "pymisapp")]
struct Dataset {
    inner: SplitData,
}

#[pymethods]
impl Dataset {
    /// Cleans, sessionizes and splits `events` (CSV text).
    #[staticmethod]
    #[pyo3(signature = (events, poi=None, seed=0, split="standard", config_json=None))]
    fn preprocess(
        events: &str,
        poi: Option<&str>,
        seed: u64,
        split: &str,
        config_json: Option<&str>,
    ) -> PyResult<Self> {
        let cfg: PreprocessConfig = parse_json(config_json, "preprocess config")?;
        let prepared = pipeline::preprocess(events, poi, &cfg, seed).map_err(err)?;
        let mode = split_mode(split)?;
        let r = prepared
            .get(mode)
            .ok_or_else(|| PyValueError::new_err(format!("{split} split unavailable")))?;
        Ok(Dataset {
            inner: SplitData::from_reindexed(r, prepared.categories.as_ref()),
        })
    }

    /// Reads a split written by the `preprocess` command.
    #[staticmethod]
    #[pyo3(signature = (out_dir, split="standard"))]
    fn load(out_dir: PathBuf, split: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: pipeline::load_split(&out_dir, split_mode(split)?).map_err(err)?,
        })
    }

    #[getter]
    fn num_apps(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn num_categories(&self) -> usize {
        self.inner.num_categories
    }

    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        let s = &self.inner.split;
        (s.train.len(), s.val.len(), s.test.len())
    }

    fn app_names(&self) -> Vec<String> {
        self.inner.vocab.names().to_vec()
    }

    /// Instances of one set as `(window, target, tau, rho)` tuples.
    #[pyo3(signature = (which="test"))]
    fn instances(&self, which: &str) -> PyResult<Vec<(Vec<u32>, u32, u8, Option<u32>)>> {
        Ok(self
            .inner
            .instances(which)
            .map_err(err)?
            .iter()
            .map(|i| (i.window.clone(), i.target, i.tau, i.rho_category))
            .collect())
    }
}

/// A parameterized next-app model.
#[pyclass(module = "pymisapp")]
struct Model {
    inner: Misapp,
}

fn instance(model: &Misapp, window: &[u32], tau: u8, rho: Option<u32>) -> PyResult<PredictionInstance> {
    let t = model.config.window;
    let apps: Vec<u32> = window.iter().copied().filter(|&a| a != PAD).collect();
    if apps.is_empty() || apps.len() > t {
        return Err(PyValueError::new_err(format!("window needs 1..={t} apps")));
    }
    let mut w = vec![PAD; t - apps.len()];
    w.extend_from_slice(&apps);
    Ok(PredictionInstance {
        user_id: String::new(),
        window: w,
        window_len: apps.len(),
        // scoring ignores the target
        target: 1,
        tau,
        rho_category: rho,
        timestamp: 0,
    })
}

#[pymethods]
impl Model {
    /// Fresh model; `config_json` holds `ModelConfig` fields.
    #[new]
    #[pyo3(signature = (num_apps, config_json=None, num_categories=0, seed=0))]
    fn new(num_apps: usize, config_json: Option<&str>, num_categories: usize, seed: u64) -> PyResult<Self> {
        let base: ModelConfig = parse_json(config_json, "model config")?;
        let cfg = ModelConfig {
            num_apps,
            num_categories,
            ..base
        };
        Ok(Model {
            inner: Misapp::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: Misapp::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.config)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.parameter_count()
    }

    /// Scores of apps `1..=num_apps` for a window of app indices.
    #[pyo3(signature = (window, tau=0, rho=None))]
    fn scores(&self, window: Vec<u32>, tau: u8, rho: Option<u32>) -> PyResult<Vec<f64>> {
        let inst = instance(&self.inner, &window, tau, rho)?;
        self.inner.scores(&inst).map_err(err)
    }

    /// Full forward trace: graph embeddings, hop weights, attention, probabilities.
    #[pyo3(signature = (window, tau=0, rho=None))]
    fn forward<'py>(&self, py: Python<'py>, window: Vec<u32>, tau: u8, rho: Option<u32>) -> PyResult<Bound<'py, PyAny>> {
        let inst = instance(&self.inner, &window, tau, rho)?;
        serialize(py, &self.inner.forward(&inst).map_err(err)?)
    }

    /// Compact explanation: hop weights, pooling attention, top-10 apps.
    #[pyo3(signature = (window, tau=0, rho=None))]
    fn explain<'py>(&self, py: Python<'py>, window: Vec<u32>, tau: u8, rho: Option<u32>) -> PyResult<Bound<'py, PyAny>> {
        let inst = instance(&self.inner, &window, tau, rho)?;
        let trace = self.inner.forward(&inst).map_err(err)?;
        to_py(py, &trace_json(&trace, None))
    }
}

/// Trains on `dataset`; returns the best model and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (dataset, model_json=None, train_json=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    model_json: Option<&str>,
    train_json: Option<&str>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let base: ModelConfig = parse_json(model_json, "model config")?;
    let tc: TrainConfig = parse_json(train_json, "train config")?;
    let data = &dataset.inner;
    let out = fit(&data.split.train, &data.split.val, &data.model_config(&base), &tc).map_err(err)?;
    Ok((Model { inner: out.model }, serialize(py, &out.history)?))
}

/// Model, MFU and MRU metrics on one instance set.
#[pyfunction]
#[pyo3(signature = (model, dataset, which="test", mrr_mode="truncated"))]
fn evaluate<'py>(py: Python<'py>, model: &Model, dataset: &Dataset, which: &str, mrr_mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let mode: MrrMode = mrr_mode.parse().map_err(err)?;
    let report = pipeline::evaluate_all(&model.inner, &dataset.inner, which, mode).map_err(err)?;
    let text = report.to_json().map_err(err)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Hop-weight alignment and perturbation report for a full and a single-hop model.
#[pyfunction]
#[pyo3(signature = (full, one_hop, dataset, samples=50, which="test"))]
fn explain<'py>(
    py: Python<'py>,
    full: &Model,
    one_hop: &Model,
    dataset: &Dataset,
    samples: usize,
    which: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExplainConfig {
        samples,
        on: which.into(),
        ..ExplainConfig::default()
    };
    serialize(py, &pipeline::explain(&full.inner, &one_hop.inner, &dataset.inner, &cfg).map_err(err)?)
}

/// Largest finite-difference relative error per parameter tensor.
#[pyfunction]
#[pyo3(signature = (model_json=None, seed=0, step=1e-5))]
pub fn gradcheck(model_json: Option<&str>, seed: u64, step: f64) -> PyResult<Vec<(String, f64)>> {
    let cfg: ModelConfig = parse_json(model_json, "model config")?;
    pipeline::gradcheck(&cfg, seed, step).map_err(err)
}

/// 1-, 2- and 3-hop edge lists of a window.
#[pyfunction]
pub fn session_graphs(window: Vec<u32>) -> PyResult<Vec<Vec<(u32, u32)>>> {
    let g = build_graphs(&window).map_err(err)?;
    Ok((1..=3).map(|h| g.edges(h).iter().copied().collect()).collect())
}

#[pyfunction]
pub fn kendall_tau(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    kendall(&xs, &ys).map_err(err)
}

/// Runs the command-line interface in-process and returns its exit status.
#[pyfunction]
pub fn run_cli(args: Vec<String>) -> i32 {
    misapp::cli::dispatch(std::iter::once("misapp".to_string()).chain(args))
}

#[pymodule]
fn pymisapp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(session_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
