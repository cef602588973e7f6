//! Python bindings for the ultrank pipeline: dataset generation and parsing,
//! click simulation, model training, and ranking metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ultrank::clicksim::{self, ClickModelConfig};
use ultrank::dataset;
use ultrank::eval;
use ultrank::models::{self, AdvLabel, ModelSpec, TrainConfig, TrainSeeds, Variant};
use ultrank::nnkernel::{Matrix, OptimizerConfig};
use ultrank::policy::{self, LoggingPolicy};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A ranking dataset: query groups of feature vectors with graded labels.
#[pyclass]
#[derive(Clone)]
struct Dataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn num_queries(&self) -> usize {
        self.inner.num_queries()
    }

    #[getter]
    fn num_documents(&self) -> usize {
        self.inner.num_documents()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Labels of one query group, in document order.
    fn labels(&self, query_index: usize) -> PyResult<Vec<u32>> {
        let g = self
            .inner
            .groups
            .get(query_index)
            .ok_or_else(|| value_err(format!("no query group {query_index}")))?;
        Ok(g.documents.iter().map(|d| d.label).collect())
    }

    fn query_id(&self, query_index: usize) -> PyResult<String> {
        self.inner
            .groups
            .get(query_index)
            .map(|g| g.query_id.clone())
            .ok_or_else(|| value_err(format!("no query group {query_index}")))
    }

    /// Serialize to LibSVM-ranking text.
    fn to_libsvm(&self) -> String {
        dataset::to_libsvm(&self.inner)
    }

    /// Metadata summary as a JSON string.
    fn summary(&self) -> String {
        self.inner.summary_json().to_string()
    }

    /// Shuffle query groups by seed and split into (train, valid, test).
    fn split(&self, ratios: [f64; 3], seed: u64) -> PyResult<(Dataset, Dataset, Dataset)> {
        let (a, b, c) = dataset::split(&self.inner, ratios, seed).map_err(value_err)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }, Dataset { inner: c }))
    }

    /// Standardize features (fit on self, returning the transformed copy).
    fn normalized(&self) -> PyResult<Dataset> {
        let (_, applied) = dataset::normalize_features(&self.inner).map_err(value_err)?;
        Ok(Dataset { inner: applied })
    }

    fn __len__(&self) -> usize {
        self.inner.num_queries()
    }
}

/// Parse LibSVM-ranking text (`<grade> qid:<id> <idx>:<val> ...`).
#[pyfunction]
fn parse_libsvm(text: &str) -> PyResult<Dataset> {
    Ok(Dataset {
        inner: dataset::parse_libsvm_ranking(text).map_err(value_err)?,
    })
}

/// Generate a synthetic graded-relevance dataset.
#[pyfunction]
#[pyo3(signature = (num_queries, docs_per_query, dim, teacher_seed, grade_quantiles=None))]
fn generate_synthetic(
    num_queries: usize,
    docs_per_query: usize,
    dim: usize,
    teacher_seed: u64,
    grade_quantiles: Option<[f64; 4]>,
) -> PyResult<Dataset> {
    let cfg = dataset::SynthConfig {
        num_queries,
        docs_per_query,
        dim,
        teacher_seed,
        grade_quantiles: grade_quantiles.unwrap_or([0.5, 0.75, 0.9, 0.97]),
    };
    Ok(Dataset {
        inner: dataset::generate_synthetic(&cfg).map_err(value_err)?,
    })
}

/// A simulated click log with its provenance.
#[pyclass]
#[derive(Clone)]
struct ClickLog {
    inner: clicksim::ClickLog,
}

#[pymethods]
impl ClickLog {
    #[getter]
    fn num_records(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn total_clicks(&self) -> u64 {
        self.inner.total_clicks()
    }

    #[getter]
    fn total_impressions(&self) -> u64 {
        self.inner.total_impressions()
    }

    /// Positions of one record (1-based, per document).
    fn positions(&self, record_index: usize) -> PyResult<Vec<u32>> {
        self.inner
            .records
            .get(record_index)
            .map(|r| r.positions.clone())
            .ok_or_else(|| value_err(format!("no record {record_index}")))
    }

    fn clicks(&self, record_index: usize) -> PyResult<Vec<u8>> {
        self.inner
            .records
            .get(record_index)
            .map(|r| r.clicks.clone())
            .ok_or_else(|| value_err(format!("no record {record_index}")))
    }

    /// Serialize as line-delimited JSON.
    fn to_ldjson(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_ldjson(&mut buf).map_err(runtime_err)?;
        String::from_utf8(buf).map_err(runtime_err)
    }

    /// Per-position examination propensities estimated from this log,
    /// normalized to 1.0 at position 1.
    fn estimate_propensities(&self) -> PyResult<Vec<f64>> {
        Ok(eval::estimate_propensities(&self.inner)
            .map_err(runtime_err)?
            .values)
    }
}

fn build_policy(policy: &str, w: Option<f64>, seed: u64) -> PyResult<LoggingPolicy> {
    match w {
        Some(w) => LoggingPolicy::new(w, seed).map_err(value_err),
        None => LoggingPolicy::preset(policy, seed).map_err(value_err),
    }
}

/// Log positions under a weighted-sum policy and sample PBM clicks.
#[pyfunction]
#[pyo3(signature = (data, policy="oracle", policy_w=None, policy_seed=11, epsilon=0.1, click_seed=13, sessions=1))]
#[allow(clippy::too_many_arguments)]
fn simulate_clicks(
    data: &Dataset,
    policy: &str,
    policy_w: Option<f64>,
    policy_seed: u64,
    epsilon: f64,
    click_seed: u64,
    sessions: u32,
) -> PyResult<ClickLog> {
    let policy = build_policy(policy, policy_w, policy_seed)?;
    let logged = policy::apply_policy(&data.inner, &policy).map_err(runtime_err)?;
    let cfg = ClickModelConfig {
        epsilon,
        y_max: data.inner.y_max,
        seed: click_seed,
    };
    let log = clicksim::sample_clicks_sessions(&logged, &data.inner, &cfg, &policy, sessions)
        .map_err(runtime_err)?;
    Ok(ClickLog { inner: log })
}

/// PBM click probability for a grade at a position.
#[pyfunction]
#[pyo3(signature = (grade, position, epsilon=0.1, y_max=4))]
fn click_prob(grade: u32, position: u32, epsilon: f64, y_max: u32) -> PyResult<f64> {
    let cfg = ClickModelConfig {
        epsilon,
        y_max,
        seed: 0,
    };
    clicksim::click_prob(grade, position, &cfg).map_err(value_err)
}

/// NDCG@k of grades listed in predicted rank order.
#[pyfunction]
fn ndcg_at_k(grades_in_rank_order: Vec<f64>, k: usize) -> PyResult<f64> {
    eval::ndcg_at_k(&grades_in_rank_order, k).map_err(value_err)
}

/// Two-sided paired t-test; returns (t, p, significant).
#[pyfunction]
#[pyo3(signature = (a, b, alpha=0.05))]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>, alpha: f64) -> PyResult<(f64, f64, bool)> {
    let r = eval::paired_t_test(&a, &b, alpha).map_err(value_err)?;
    Ok((r.t, r.p, r.significant))
}

/// A trained click-model variant; serving uses only its relevance tower.
#[pyclass]
struct Model {
    inner: models::TrainedModel,
}

#[pymethods]
impl Model {
    #[getter]
    fn variant(&self) -> String {
        format!("{:?}", self.inner.spec.variant)
    }

    /// Relevance scores for a batch of feature rows (eval mode).
    fn predict(&mut self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let rows: Vec<&[f64]> = features.iter().map(|r| r.as_slice()).collect();
        let x = Matrix::from_rows(&rows).map_err(value_err)?;
        self.inner.predict_relevance(&x).map_err(runtime_err)
    }

    /// Mean NDCG@k of the relevance tower on a labeled dataset.
    fn mean_ndcg(&mut self, data: &Dataset, k: usize) -> PyResult<f64> {
        Ok(eval::mean_ndcg(&mut self.inner, &data.inner, k)
            .map_err(runtime_err)?
            .mean)
    }

    /// Per-epoch (train_loss, val_ndcg5) training history.
    fn history(&self) -> Vec<(f64, Option<f64>)> {
        self.inner
            .history
            .iter()
            .map(|r| (r.train_loss, r.val_ndcg5))
            .collect()
    }

    /// Full checkpoint (spec + parameters) as a JSON string.
    fn checkpoint_json(&self) -> String {
        models::ModelCheckpoint::capture(&self.inner).to_json()
    }
}

/// Restore a model from `Model.checkpoint_json` output.
#[pyfunction]
fn load_model(checkpoint_json: &str) -> PyResult<Model> {
    let ckpt = models::ModelCheckpoint::from_json(checkpoint_json).map_err(value_err)?;
    Ok(Model {
        inner: ckpt.restore().map_err(runtime_err)?,
    })
}

/// Train a click-model variant on a click log.
#[pyfunction]
#[pyo3(signature = (variant, train, log, valid=None, epochs=30, batch_size=256, lr=1e-3,
                    eta=0.6, tau=0.3, adv_label="click", seed=1, patience=10,
                    relevance_tower=None, observation_tower=None))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    variant: &str,
    train: &Dataset,
    log: &ClickLog,
    valid: Option<&Dataset>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    eta: f64,
    tau: f64,
    adv_label: &str,
    seed: u64,
    patience: usize,
    relevance_tower: Option<Vec<usize>>,
    observation_tower: Option<Vec<usize>>,
) -> PyResult<Model> {
    let variant = match variant {
        "biased" => Variant::Biased,
        "pal" => Variant::Pal,
        "grad_rev" | "gradrev" => Variant::GradRev,
        "drop" => Variant::Drop,
        "drop_grad_rev" | "drop_gradrev" => Variant::DropGradRev,
        other => return Err(value_err(format!("unknown variant `{other}`"))),
    };
    let adv_label = match adv_label {
        "utility" => AdvLabel::Utility,
        "click" => AdvLabel::Click,
        "prediction" => AdvLabel::Prediction,
        other => return Err(value_err(format!("unknown adversarial label `{other}`"))),
    };
    let mut spec = ModelSpec::new(variant);
    spec.eta = eta;
    spec.tau = tau;
    spec.adv_label = adv_label;
    if let Some(widths) = relevance_tower {
        spec.relevance_tower = widths;
    }
    if let Some(widths) = observation_tower {
        spec.observation_tower = widths;
    }
    let cfg = TrainConfig {
        epochs,
        batch_size,
        optimizer: OptimizerConfig::adam(lr),
        seeds: TrainSeeds {
            init: seed,
            shuffle: seed.wrapping_add(1),
            dropout: seed.wrapping_add(2),
        },
        patience,
    };
    let trained = models::train(
        &spec,
        &log.inner,
        &train.inner,
        valid.map(|v| &v.inner),
        &cfg,
    )
    .map_err(runtime_err)?;
    Ok(Model { inner: trained })
}

/// Run a full experiment config (TOML text) into a directory; returns the
/// aggregate table as a JSON string.
#[pyfunction]
fn run_experiment(config_toml: &str, out_dir: &str) -> PyResult<String> {
    let cfg = ultrank::experiment::ExperimentConfig::from_toml(config_toml).map_err(value_err)?;
    let agg = ultrank::experiment::run_experiment(&cfg, out_dir).map_err(runtime_err)?;
    serde_json::to_string(&agg).map_err(runtime_err)
}

#[pymodule]
fn ultrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<ClickLog>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse_libsvm, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_clicks, m)?)?;
    m.add_function(wrap_pyfunction!(click_prob, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
