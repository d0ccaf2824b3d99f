//! Python bindings: data generation, training, evaluation, checkpoint
//! inspection and the standalone math (mask, losses, metrics).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use synergen::attention::{build_mask, TokenKind, TokenMeta};
use synergen::config::{RunConfig, RunData};
use synergen::decoder::{load_checkpoint, Model};
use synergen::embeddings::{load_semantic, synth_semantic};
use synergen::evaluation::{rank_scores, score_candidates, run_eval, Task};
use synergen::events::{load_events, synth_generate, write_events, Action, Event, SynthSpec};
use synergen::trainer::{gradcheck, gradcheck_fixture, train as run_training, RunOutputs, TrainData, Trainer};

create_exception!(synergen_py, SynergenError, PyException);

fn err(e: synergen::Error) -> PyErr {
    SynergenError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SynergenError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| SynergenError::new_err(e.to_string()))
}

fn parse_enum<T: DeserializeOwned>(name: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_owned()))
        .map_err(|_| SynergenError::new_err(format!("unknown {name} {value:?}")))
}

/// Writes `events.jsonl` and the semantic tables to `out`; returns the user count.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, spec = None))]
fn synth(py: Python<'_>, out: PathBuf, seed: u64, spec: Option<&Bound<'_, PyAny>>) -> PyResult<usize> {
    let spec: SynthSpec = match spec {
        Some(s) => from_py(py, s)?,
        None => SynthSpec::default(),
    };
    spec.validate().map_err(err)?;
    std::fs::create_dir_all(&out).map_err(|e| SynergenError::new_err(e.to_string()))?;
    let sessions = synth_generate(&spec, seed).map_err(err)?;
    write_events(out.join("events.jsonl"), &sessions).map_err(err)?;
    synth_semantic(&spec, seed).map_err(err)?.save(&out).map_err(err)?;
    Ok(sessions.len())
}

/// Trains from a run-config file; returns the per-step metrics records.
#[pyfunction]
#[pyo3(signature = (config, steps = None, seed = None, output_dir = None))]
fn train(py: Python<'_>, config: PathBuf, steps: Option<u64>, seed: Option<u64>, output_dir: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let mut cfg = RunConfig::load(&config).map_err(err)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.validate().map_err(err)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| SynergenError::new_err(e.to_string()))?;
    let records = py
        .detach(|| -> synergen::Result<_> {
            let data = RunData::load(&cfg.data, &cfg.model)?;
            let mut trainer = Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone(), cfg.to_canonical_json()?)?;
            let outputs = RunOutputs { metrics_log: Some(cfg.metrics_path()), checkpoint: Some(cfg.checkpoint_path()) };
            let td = TrainData { sessions: &data.sessions, split: &data.split, store: &data.store };
            run_training(&mut trainer, &td, &outputs)
        })
        .map_err(err)?;
    to_py(py, &records)
}

/// Evaluates a checkpoint; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, task = "retrieval", mode = "recommendation", protocol = "full", events = None, semantic_dir = None, seeds = None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    task: &str,
    mode: &str,
    protocol: &str,
    events: Option<PathBuf>,
    semantic_dir: Option<PathBuf>,
    seeds: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let ck = load_checkpoint(&checkpoint).map_err(err)?;
    let mut cfg = RunConfig::from_json(&ck.config_json).map_err(err)?;
    cfg.eval.task = parse_enum("task", task)?;
    cfg.eval.mode = parse_enum("mode", mode)?;
    cfg.eval.protocol = parse_enum("protocol", protocol)?;
    if let Some(p) = events {
        cfg.data.events = p;
    }
    if let Some(p) = semantic_dir {
        cfg.data.semantic_dir = p;
    }
    if let Some(n) = seeds {
        cfg.eval.seeds = n;
    }
    cfg.eval.validate().map_err(err)?;
    let report = py
        .detach(|| -> synergen::Result<_> {
            let model = Model::from_checkpoint(&ck)?;
            let data = RunData::load(&cfg.data, &model.config)?;
            run_eval(&model, &data.sessions, &data.split, &data.store, &cfg.eval)
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// Backprop versus central differences on the fixed tiny model.
#[pyfunction]
#[pyo3(signature = (seed = 0, samples = 8))]
fn gradient_check(py: Python<'_>, seed: u64, samples: usize) -> PyResult<Py<PyAny>> {
    let fx = gradcheck_fixture(seed).map_err(err)?;
    let report = gradcheck(&fx.model, &fx.store, &fx.batch, &fx.weights, samples, 1e-5, seed).map_err(err)?;
    to_py(py, &report)
}

/// Attention permissions for `(kind, t, request_group, event_id)` tokens.
#[pyfunction]
#[pyo3(signature = (tokens, theta = 0))]
fn attention_mask(tokens: Vec<(String, i64, i64, i64)>, theta: i64) -> PyResult<Vec<Vec<bool>>> {
    let metas = tokens
        .into_iter()
        .enumerate()
        .map(|(index, (kind, t, req_group, event_id))| {
            Ok(TokenMeta { kind: parse_enum::<TokenKind>("token kind", &kind)?, t, req_group, event_id, index })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let mask = build_mask(&metas, theta);
    Ok((0..metas.len()).map(|i| (0..metas.len()).map(|j| mask.get(i, j)).collect()).collect())
}

#[pyfunction]
#[pyo3(signature = (span_seconds, bucket_seconds = 60.0))]
fn select_rope_base(span_seconds: f64, bucket_seconds: f64) -> f64 {
    synergen::attention::select_rope_base(span_seconds, bucket_seconds)
}

#[pyfunction]
#[pyo3(signature = (h, positive, negatives, tau = 0.085))]
fn infonce(h: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    synergen::losses::infonce(&h, &positive, &negatives, tau).map_err(err)
}

#[pyfunction]
fn pointwise_bce(logit: f64, label: bool) -> f64 {
    synergen::losses::pointwise_bce(logit, label)
}

#[pyfunction]
fn pairwise_loss(pairs: Vec<(usize, usize)>, logits: Vec<f64>) -> f64 {
    synergen::losses::pairwise_loss(&pairs, &logits)
}

#[pyfunction]
fn recall_at_k(rank: usize, k: usize) -> f64 {
    synergen::evaluation::recall_at_k(rank, k)
}

#[pyfunction]
fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    synergen::evaluation::ndcg_at_k(rank, k)
}

#[pyfunction]
fn mrr(rank: usize) -> f64 {
    synergen::evaluation::mrr(rank)
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: Model,
    step: u64,
    config_json: String,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        let model = Model::from_checkpoint(&ck).map_err(err)?;
        Ok(Self { model, step: ck.step, config_json: ck.config_json })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        Ok(py.import("json")?.call_method1("loads", (self.config_json.as_str(),))?.unbind())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.params.numel()
    }

    /// Top-`k` items for the next interaction of `user`, optionally under a
    /// search query. `at` is the request time; it defaults to one second after
    /// the last event.
    #[pyo3(signature = (events, semantic_dir, user, k = 10, query = None, at = None))]
    #[allow(clippy::too_many_arguments)]
    fn recommend(
        &self,
        py: Python<'_>,
        events: PathBuf,
        semantic_dir: PathBuf,
        user: &str,
        k: usize,
        query: Option<u32>,
        at: Option<i64>,
    ) -> PyResult<Vec<(u32, f64)>> {
        let cfg = &self.model.config;
        let ranked = py
            .detach(|| -> synergen::Result<_> {
                let sessions = load_events(&events)?;
                let store = load_semantic(&semantic_dir, cfg.item_semantic_dim, cfg.query_dim)?;
                let session = sessions
                    .iter()
                    .find(|s| s.user_id == user)
                    .ok_or_else(|| synergen::Error::UnknownUser(user.to_owned()))?;
                let last = session.events.last().ok_or_else(|| synergen::Error::UnknownUser(user.to_owned()))?;
                let next = Event {
                    user_id: user.to_owned(),
                    event_id: last.event_id + 1,
                    request_group: last.request_group + 1,
                    t_unix: at.unwrap_or(last.t_unix + 1),
                    item_id: 0,
                    action: Action::Click,
                    query_id: query,
                    clicked: true,
                };
                let pool: Vec<u32> = (0..cfg.items as u32).collect();
                let scored = score_candidates(&self.model, &store, &session.events, &next, query, Task::Retrieval, &pool, usize::MAX)?;
                Ok(rank_scores(scored))
            })
            .map_err(err)?;
        Ok(ranked.into_iter().take(k).map(|s| (s.item, s.score)).collect())
    }
}

#[pymodule]
fn synergen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SynergenError", m.py().get_type::<SynergenError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(select_rope_base, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(pointwise_bce, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    Ok(())
}
