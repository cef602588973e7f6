//! End-to-end experiment execution: resolve data once, then run every
//! (repetition seed, policy, model) cell, writing per-seed artifacts and an
//! aggregate table. All outputs are byte-deterministic functions of the
//! config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::clicksim::{sample_clicks_sessions, ClickLog, ClickModelConfig};
use crate::dataset::{self, Dataset, FeatureTransform};
use crate::eval::{self, EvalReport};
use crate::models::{self, ModelCheckpoint, TrainedModel};
use crate::policy::{apply_policy, LoggingPolicy};
use crate::rng::mix;

use super::config::{DatasetSource, ExperimentConfig, ModelConfig};
use super::ExperimentError;

/// Stream tag separating the test split's policy/click streams from the
/// train split's.
const TEST_SPLIT_SALT: u64 = 0x7e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Write clicklog_train/clicklog_test LDJSON files per (seed, policy).
    pub write_clicklogs: bool,
    /// Write the resolved dataset splits in LibSVM form.
    pub write_dataset: bool,
    /// Train models (reusing existing checkpoints when present) and write
    /// checkpoints + history.
    pub train: bool,
    /// Evaluate trained models and write per-seed reports + the aggregate.
    pub evaluate: bool,
}

impl RunOptions {
    pub fn simulate() -> Self {
        RunOptions {
            write_clicklogs: true,
            write_dataset: false,
            train: false,
            evaluate: false,
        }
    }

    pub fn train_only() -> Self {
        RunOptions {
            write_clicklogs: false,
            write_dataset: false,
            train: true,
            evaluate: false,
        }
    }

    pub fn full() -> Self {
        RunOptions {
            write_clicklogs: false,
            write_dataset: false,
            train: true,
            evaluate: true,
        }
    }
}

/// Train/valid/test splits after normalization.
pub struct PreparedData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub transform: FeatureTransform,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let (train, valid, test) = match cfg.dataset.source {
        DatasetSource::Synthetic => {
            let synth = cfg.dataset.synthetic.as_ref().expect("validated");
            let ds = dataset::generate_synthetic(synth)?;
            dataset::split(&ds, cfg.dataset.split, cfg.dataset.split_seed)?
        }
        DatasetSource::Libsvm => {
            let lib = cfg.dataset.libsvm.as_ref().expect("validated");
            if let Some(path) = &lib.path {
                let text = fs::read_to_string(path).map_err(|e| {
                    ExperimentError::Config(format!("cannot read dataset `{path}`: {e}"))
                })?;
                let ds = dataset::parse_libsvm_ranking_with(&text, lib.y_max)?;
                dataset::split(&ds, cfg.dataset.split, cfg.dataset.split_seed)?
            } else {
                let mut parts = Vec::with_capacity(3);
                for path in [
                    lib.train.as_ref().expect("validated"),
                    lib.valid.as_ref().expect("validated"),
                    lib.test.as_ref().expect("validated"),
                ] {
                    let text = fs::read_to_string(path).map_err(|e| {
                        ExperimentError::Config(format!("cannot read dataset `{path}`: {e}"))
                    })?;
                    parts.push(dataset::parse_libsvm_ranking_with(&text, lib.y_max)?);
                }
                let dim = parts.iter().map(|d| d.dim).max().unwrap_or(0);
                for p in &mut parts {
                    // pad to the common dimensionality so splits agree
                    if p.dim < dim {
                        for g in &mut p.groups {
                            for d in &mut g.documents {
                                d.features.resize(dim, 0.0);
                            }
                        }
                        p.dim = dim;
                    }
                }
                let test = parts.pop().unwrap();
                let valid = parts.pop().unwrap();
                let train = parts.pop().unwrap();
                (train, valid, test)
            }
        }
    };
    if train.groups.is_empty() {
        return Err(ExperimentError::Config("train split is empty".into()));
    }
    let (transform, train) = if cfg.dataset.normalize {
        dataset::normalize_features(&train)?
    } else {
        (FeatureTransform::identity(train.dim), train)
    };
    let valid = transform.apply(&valid);
    let test = transform.apply(&test);
    Ok(PreparedData {
        train,
        valid,
        test,
        transform,
    })
}

/// One aggregate table row: a (policy, model, metric) cell summarized over
/// repetition seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub model: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
    #[serde(default)]
    pub delta_vs_baseline: Option<f64>,
    #[serde(default)]
    pub p_value: Option<f64>,
    #[serde(default)]
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunAggregate {
    pub config_sha256: String,
    pub tool_version: String,
    pub alpha: f64,
    pub baseline: Option<String>,
    pub rows: Vec<AggregateRow>,
}

impl RunAggregate {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("policy,model,metric,k,mean,std,delta_vs_baseline,p_value,significant\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.policy,
                r.model,
                r.metric,
                r.k,
                r.mean,
                r.std,
                r.delta_vs_baseline.map_or(String::new(), |v| v.to_string()),
                r.p_value.map_or(String::new(), |v| v.to_string()),
                r.significant.map_or(String::new(), |v| v.to_string()),
            );
        }
        out
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn history_csv(model: &TrainedModel) -> String {
    let mut out = String::from("epoch,train_loss,val_ndcg5\n");
    for r in &model.history {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_ndcg5.map_or(String::new(), |v| v.to_string())
        );
    }
    out
}

/// Everything produced for one (seed, policy, model) cell.
struct CellResult {
    seed: u64,
    policy_label: String,
    model_name: String,
    /// (metric name, k, report)
    reports: Vec<(String, usize, EvalReport)>,
}

struct PolicyJob<'a> {
    rep_seed: u64,
    policy_label: String,
    policy: LoggingPolicy,
    data: &'a PreparedData,
}

fn run_policy_job(
    job: &PolicyJob,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<Vec<CellResult>, ExperimentError> {
    let rep_seed = job.rep_seed;
    let mut policy = job.policy;
    policy.seed = mix(policy.seed, rep_seed);
    let mut test_policy = policy;
    test_policy.seed = mix(policy.seed, TEST_SPLIT_SALT);

    let click_cfg = ClickModelConfig {
        epsilon: cfg.clicks.epsilon,
        y_max: cfg.clicks.y_max,
        seed: mix(cfg.clicks.seed, rep_seed),
    };
    let test_click_cfg = ClickModelConfig {
        seed: mix(click_cfg.seed, TEST_SPLIT_SALT),
        ..click_cfg
    };

    let logged_train = apply_policy(&job.data.train, &policy)?;
    let train_log = sample_clicks_sessions(
        &logged_train,
        &job.data.train,
        &click_cfg,
        &policy,
        cfg.clicks.sessions,
    )?;
    let logged_test = apply_policy(&job.data.test, &test_policy)?;
    let test_log = sample_clicks_sessions(
        &logged_test,
        &job.data.test,
        &test_click_cfg,
        &test_policy,
        cfg.clicks.eval_sessions,
    )?;

    let policy_dir = out_dir
        .join(format!("seed_{rep_seed}"))
        .join(format!("policy_{}", job.policy_label));

    if opts.write_clicklogs {
        for (name, log) in [("clicklog_train", &train_log), ("clicklog_test", &test_log)] {
            let mut buf = Vec::new();
            log.write_ldjson(&mut buf)?;
            write_file(
                &policy_dir.join(format!("{name}.ldjson")),
                &String::from_utf8(buf).expect("ldjson is utf8"),
            )?;
        }
    }

    if !opts.train {
        return Ok(Vec::new());
    }

    let train_cfg = cfg.train.for_repetition(rep_seed);
    let mut results = Vec::new();
    for model_cfg in &cfg.models {
        let model_dir = policy_dir.join(format!("model_{}", model_cfg.name));
        let ckpt_path = model_dir.join("checkpoint.json");
        let mut model = obtain_model(
            &ckpt_path,
            model_cfg,
            &train_log,
            &job.data.train,
            &job.data.valid,
            &train_cfg,
        )?;

        let mut reports = Vec::new();
        if opts.evaluate {
            let propensities = eval::estimate_propensities(&test_log)?;
            for &k in &cfg.eval.ks {
                let ndcg = eval::mean_ndcg(&mut model, &job.data.test, k)?;
                write_file(
                    &model_dir.join(format!("eval_ndcg@{k}.csv")),
                    &ndcg.to_csv(),
                )?;
                reports.push((format!("ndcg@{k}"), k, ndcg));
                let ips =
                    eval::ips_ndcg_at_k(&mut model, &test_log, &job.data.test, &propensities, k)?;
                write_file(
                    &model_dir.join(format!("eval_ips-ndcg@{k}.csv")),
                    &ips.to_csv(),
                )?;
                reports.push((format!("ips-ndcg@{k}"), k, ips));
            }
            let summary: Vec<serde_json::Value> = reports
                .iter()
                .map(|(_, _, r)| r.summary_json())
                .collect();
            write_file(
                &model_dir.join("report.json"),
                &serde_json::to_string_pretty(&summary).expect("json"),
            )?;
        }
        results.push(CellResult {
            seed: rep_seed,
            policy_label: job.policy_label.clone(),
            model_name: model_cfg.name.clone(),
            reports,
        });
    }
    Ok(results)
}

/// Load a model checkpoint if one exists for this cell, otherwise train and
/// write it. Training is deterministic, so a reused checkpoint matches a
/// fresh one bit for bit.
fn obtain_model(
    ckpt_path: &Path,
    model_cfg: &ModelConfig,
    train_log: &ClickLog,
    train: &Dataset,
    valid: &Dataset,
    train_cfg: &models::TrainConfig,
) -> Result<TrainedModel, ExperimentError> {
    let spec = model_cfg.to_spec();
    if ckpt_path.exists() {
        let text = fs::read_to_string(ckpt_path)?;
        let stored = ModelCheckpoint::from_json(&text)?;
        if stored.spec == spec && stored.input_dim == train.dim {
            return Ok(stored.restore()?);
        }
    }
    let valid_opt = (!valid.groups.is_empty()).then_some(valid);
    let model = models::train(&spec, train_log, train, valid_opt, train_cfg)?;
    write_file(ckpt_path, &ModelCheckpoint::capture(&model).to_json())?;
    write_file(
        &ckpt_path.with_file_name("history.csv"),
        &history_csv(&model),
    )?;
    Ok(model)
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Run the full pipeline for a config into `out_dir`. Returns the aggregate
/// table (also written as aggregate.csv / aggregate.json when evaluating).
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunAggregate, ExperimentError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    fs::create_dir_all(out_dir)?;

    let config_toml = cfg.to_toml();
    let config_sha = sha256_hex(&config_toml);
    write_file(&out_dir.join("config.toml"), &config_toml)?;
    let manifest = serde_json::json!({
        "tool": "ultrank",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_sha,
        "seeds": cfg.run.seeds,
        "policies": cfg.policies.iter().map(|p| p.label()).collect::<Vec<_>>(),
        "models": cfg.models.iter().map(|m| m.name.clone()).collect::<Vec<_>>(),
        "dataset": {
            "train_queries": data.train.num_queries(),
            "valid_queries": data.valid.num_queries(),
            "test_queries": data.test.num_queries(),
            "dim": data.train.dim,
        },
    });
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("json"),
    )?;

    if opts.write_dataset {
        write_file(&out_dir.join("train.libsvm"), &dataset::to_libsvm(&data.train))?;
        write_file(&out_dir.join("valid.libsvm"), &dataset::to_libsvm(&data.valid))?;
        write_file(&out_dir.join("test.libsvm"), &dataset::to_libsvm(&data.test))?;
    }
    write_file(
        &out_dir.join("dataset_summary.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "train": data.train.summary_json(),
            "valid": data.valid.summary_json(),
            "test": data.test.summary_json(),
        }))
        .expect("json"),
    )?;

    let mut jobs = Vec::new();
    for &rep_seed in &cfg.run.seeds {
        for pcfg in &cfg.policies {
            jobs.push(PolicyJob {
                rep_seed,
                policy_label: pcfg.label(),
                policy: pcfg.build()?,
                data: &data,
            });
        }
    }

    // independent jobs in parallel; results keyed by job order for
    // deterministic aggregation
    let results: Result<Vec<Vec<CellResult>>, ExperimentError> = jobs
        .par_iter()
        .map(|job| run_policy_job(job, cfg, out_dir, opts))
        .collect();
    let cells: Vec<CellResult> = results?.into_iter().flatten().collect();

    let mut aggregate = RunAggregate {
        config_sha256: config_sha,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        alpha: cfg.eval.alpha,
        baseline: cfg.eval.baseline.clone(),
        rows: Vec::new(),
    };

    if opts.evaluate {
        for pcfg in &cfg.policies {
            let plabel = pcfg.label();
            for model_cfg in &cfg.models {
                for &k in &cfg.eval.ks {
                    for metric in [format!("ndcg@{k}"), format!("ips-ndcg@{k}")] {
                        let mut per_seed = Vec::new();
                        let mut pooled: Vec<f64> = Vec::new();
                        let mut pooled_base: Vec<f64> = Vec::new();
                        for &rep_seed in &cfg.run.seeds {
                            let cell = cells
                                .iter()
                                .find(|c| {
                                    c.seed == rep_seed
                                        && c.policy_label == plabel
                                        && c.model_name == model_cfg.name
                                })
                                .expect("cell exists");
                            let report = &cell
                                .reports
                                .iter()
                                .find(|(m, _, _)| *m == metric)
                                .expect("metric exists")
                                .2;
                            per_seed.push(report.mean);
                            if let Some(base_name) = &cfg.eval.baseline {
                                let base_cell = cells
                                    .iter()
                                    .find(|c| {
                                        c.seed == rep_seed
                                            && c.policy_label == plabel
                                            && &c.model_name == base_name
                                    })
                                    .expect("baseline cell exists");
                                let base_report = &base_cell
                                    .reports
                                    .iter()
                                    .find(|(m, _, _)| *m == metric)
                                    .expect("metric exists")
                                    .2;
                                pooled.extend(report.values());
                                pooled_base.extend(base_report.values());
                            }
                        }
                        let n = per_seed.len() as f64;
                        let mean = per_seed.iter().sum::<f64>() / n;
                        let std = if per_seed.len() > 1 {
                            (per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                                / (n - 1.0))
                                .sqrt()
                        } else {
                            0.0
                        };
                        let (mut delta, mut p_value, mut significant) = (None, None, None);
                        if let Some(base_name) = &cfg.eval.baseline {
                            if base_name != &model_cfg.name {
                                let test =
                                    eval::paired_t_test(&pooled, &pooled_base, cfg.eval.alpha)?;
                                let base_mean =
                                    pooled_base.iter().sum::<f64>() / pooled_base.len() as f64;
                                let own_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
                                delta = Some(own_mean - base_mean);
                                p_value = Some(test.p);
                                significant = Some(test.significant);
                            }
                        }
                        aggregate.rows.push(AggregateRow {
                            policy: plabel.clone(),
                            model: model_cfg.name.clone(),
                            metric: metric.clone(),
                            k,
                            mean,
                            std,
                            per_seed: per_seed.clone(),
                            delta_vs_baseline: delta,
                            p_value,
                            significant,
                        });
                    }
                }
            }
        }
        write_file(&out_dir.join("aggregate.csv"), &aggregate.to_csv())?;
        write_file(
            &out_dir.join("aggregate.json"),
            &serde_json::to_string_pretty(&aggregate).expect("json"),
        )?;
    }

    Ok(aggregate)
}

/// The full simulate -> train -> evaluate pipeline.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunAggregate, ExperimentError> {
    run_experiment_with(cfg, out_dir.as_ref(), &RunOptions::full())
}

/// Output directory helper used by sweep runs.
pub fn value_dir(base: &Path, value: f64) -> PathBuf {
    base.join(format!("value_{value}"))
}
