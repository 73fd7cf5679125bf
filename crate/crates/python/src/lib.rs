//! Python module `prop`: configuration, synthetic data, experiment runs,
//! the cost model, and a trainable prompt-prototype model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prop_core::harness::experiment::{obtain_backbone, RunOptions};
use prop_core::harness::{self, CostModel, ExperimentConfig, Method};
use prop_core::{Checkpoint, ClassId, Error, PromptPrototypeModel, Sample, Task};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.root() {
        Error::Io(_) => PyIOError::new_err(msg),
        Error::Protocol(_) => PyRuntimeError::new_err(format!("protocol violation: {msg}")),
        _ => PyValueError::new_err(msg),
    }
}

/// Flat experiment configuration; keys as in the `key = value` file format.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        ExperimentConfig::KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .to_text()
            .lines()
            .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == key).map(|(_, v)| v.to_string()))
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, epochs={})", self.inner.seed, self.inner.epochs)
    }
}

/// Gaussian clusters on a sphere of radius `separation`: returns `(xs, ys)`.
#[pyfunction]
fn gen_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<ClassId>)> {
    let d = harness::gen_synthetic(num_classes, samples_per_class, dim, separation, seed).map_err(to_py)?;
    Ok(d.samples.into_iter().map(|s| (s.x, s.y)).unzip())
}

/// `(prop_total, kv_total)` for the closed-form inference cost.
#[pyfunction]
#[pyo3(signature = (tasks, layers, hidden_len, prompt_len, dim, pool, top_k=1))]
fn flop_estimate(
    tasks: u64,
    layers: u64,
    hidden_len: u64,
    prompt_len: u64,
    dim: u64,
    pool: u64,
    top_k: u64,
) -> PyResult<(u64, u64)> {
    let e = harness::flop_estimate(&CostModel {
        tasks,
        layers,
        hidden_len,
        prompt_len,
        dim,
        pool,
        top_k,
    })
    .map_err(to_py)?;
    Ok((e.prop_total, e.kv_total))
}

/// Run one method end to end; returns a dict with `last`, `avg`,
/// `per_task` and `retrieval_accuracy`.
#[pyfunction]
#[pyo3(signature = (config, method="prop", out_dir=None, data_dir=None, checkpoint=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &PyConfig,
    method: &str,
    out_dir: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = method.parse().map_err(to_py)?;
    let opts = RunOptions {
        out_dir,
        data_dir,
        checkpoint,
    };
    let out = harness::run_experiment(&config.inner, method, &opts).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("last", out.record.last)?;
    d.set_item("avg", out.record.avg)?;
    d.set_item("per_task", out.record.per_task)?;
    d.set_item("retrieval_accuracy", out.retrieval_accuracy)?;
    d.set_item("backbone_sha256", out.backbone_hash)?;
    Ok(d)
}

/// Frozen backbone with per-task prompts and class prototypes.
#[pyclass(name = "Model")]
struct PyModel {
    inner: PromptPrototypeModel,
}

#[pymethods]
impl PyModel {
    /// Pretrain a backbone on the base classes of the config's synthetic data.
    #[staticmethod]
    fn pretrained(config: &PyConfig) -> PyResult<Self> {
        let c = &config.inner;
        let data = harness::prepare_data(c, None).map_err(to_py)?;
        let backbone = obtain_backbone(c, &data, None).map_err(to_py)?;
        let inner = PromptPrototypeModel::new(backbone, c.train()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        let (inner, _) = ckpt.into_model(config.inner.train()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, None).save(&path).map_err(to_py)
    }

    /// Train a prompt for one task; returns the temporary head's train
    /// accuracy.
    fn learn_task(&mut self, task_id: usize, xs: Vec<Vec<f64>>, ys: Vec<ClassId>) -> PyResult<f64> {
        if xs.len() != ys.len() {
            return Err(PyValueError::new_err("xs and ys differ in length"));
        }
        let mut classes: Vec<ClassId> = ys.clone();
        classes.sort_unstable();
        classes.dedup();
        let train = xs
            .into_iter()
            .zip(ys)
            .enumerate()
            .map(|(id, (x, y))| Sample { id, x, y })
            .collect();
        let task = Task {
            id: task_id,
            classes,
            train,
            test: Vec::new(),
        };
        let outcome = self.inner.learn_task(&task).map_err(to_py)?;
        Ok(outcome.train_accuracy)
    }

    /// `(class, task_id, score)` of the best-scoring prototype.
    fn predict(&self, x: Vec<f64>) -> PyResult<(ClassId, usize, f64)> {
        let p = self.inner.predict(&x).map_err(to_py)?;
        Ok((p.class, p.task_id, p.score))
    }

    /// Feature of `x`, under the prompt of `task_id` when given.
    #[pyo3(signature = (x, task_id=None))]
    fn encode(&self, x: Vec<f64>, task_id: Option<usize>) -> PyResult<Vec<f64>> {
        let prompt = match task_id {
            Some(t) => Some(
                self.inner
                    .prompts()
                    .iter()
                    .find(|p| p.task_id == t)
                    .ok_or_else(|| PyValueError::new_err(format!("no prompt for task {t}")))?,
            ),
            None => None,
        };
        Ok(self.inner.params().encode(&x, prompt).map_err(to_py)?.into_data())
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    fn backbone_hash(&self) -> String {
        self.inner.params().content_hash()
    }
}

#[pymodule]
fn prop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(flop_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
