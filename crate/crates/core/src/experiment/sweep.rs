//! Grid sweeps over eta, tau, or the policy weight: one full experiment per
//! grid value plus a plot-ready curve file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::SweepConfig;
use super::runner::{run_experiment, value_dir, RunAggregate};
use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub policy: String,
    pub model: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub grid: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,value,policy,model,metric,k,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.parameter, r.value, r.policy, r.model, r.metric, r.k, r.mean, r.std
            );
        }
        out
    }
}

/// One run_experiment per grid value, written under value_<v>/ inside
/// `out_dir`, plus sweep.csv / sweep.json curve files.
pub fn run_sweep(cfg: &SweepConfig, out_dir: impl AsRef<Path>) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let parameter = match cfg.sweep.parameter {
        super::config::SweepParameter::Eta => "eta",
        super::config::SweepParameter::Tau => "tau",
        super::config::SweepParameter::PolicyW => "policy_w",
    };

    let mut result = SweepResult {
        parameter: parameter.to_string(),
        grid: cfg.sweep.grid.clone(),
        rows: Vec::new(),
    };
    let mut aggregates: Vec<(f64, RunAggregate)> = Vec::new();
    for &value in &cfg.sweep.grid {
        let instance = cfg.instantiate(value);
        let agg = run_experiment(&instance, value_dir(out_dir, value))?;
        aggregates.push((value, agg));
    }
    for (value, agg) in &aggregates {
        for row in &agg.rows {
            result.rows.push(SweepRow {
                parameter: parameter.to_string(),
                value: *value,
                policy: row.policy.clone(),
                model: row.model.clone(),
                metric: row.metric.clone(),
                k: row.k,
                mean: row.mean,
                std: row.std,
                per_seed: row.per_seed.clone(),
            });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), result.to_csv())?;
    std::fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&result).expect("json"),
    )?;
    Ok(result)
}
