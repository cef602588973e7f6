//! Consolidate aggregate tables from several run directories into one
//! comparison document with best-per-row flags and significance stars.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::runner::RunAggregate;
use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub policy: String,
    pub model: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub delta_vs_baseline: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
    /// Highest mean among models within the same (policy, metric) row.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub sources: Vec<String>,
    pub rows: Vec<MergedRow>,
}

impl MergedReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "policy,model,metric,k,mean,std,delta_vs_baseline,p_value,significant,best,stars\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.policy,
                r.model,
                r.metric,
                r.k,
                r.mean,
                r.std,
                r.delta_vs_baseline.map_or(String::new(), |v| v.to_string()),
                r.p_value.map_or(String::new(), |v| v.to_string()),
                r.significant.map_or(String::new(), |v| v.to_string()),
                r.best,
                if r.significant == Some(true) { "*" } else { "" },
            );
        }
        out
    }
}

/// Merge the aggregate.json files of `run_dirs`. Rows keep their run's order;
/// duplicate (policy, model, metric) cells across runs are an error.
pub fn report(run_dirs: &[impl AsRef<Path>]) -> Result<MergedReport, ExperimentError> {
    if run_dirs.is_empty() {
        return Err(ExperimentError::Config("report needs at least one run directory".into()));
    }
    let mut sources = Vec::new();
    let mut rows: Vec<MergedRow> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        let path = dir.join("aggregate.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            ExperimentError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let agg: RunAggregate = serde_json::from_str(&text).map_err(|e| {
            ExperimentError::Config(format!("schema mismatch in {}: {e}", path.display()))
        })?;
        sources.push(dir.display().to_string());
        for r in agg.rows {
            let key = (r.policy.clone(), r.model.clone(), r.metric.clone());
            if !seen.insert(key.clone()) {
                return Err(ExperimentError::Config(format!(
                    "duplicate cell ({}, {}, {}) across run directories",
                    key.0, key.1, key.2
                )));
            }
            rows.push(MergedRow {
                policy: r.policy,
                model: r.model,
                metric: r.metric,
                k: r.k,
                mean: r.mean,
                std: r.std,
                delta_vs_baseline: r.delta_vs_baseline,
                p_value: r.p_value,
                significant: r.significant,
                best: false,
            });
        }
    }

    // best flag: exactly one winner per (policy, metric) row (first max wins)
    let mut groups: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let key = (r.policy.clone(), r.metric.clone());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (policy, metric) in groups {
        let best_idx = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.policy == policy && r.metric == metric)
            .max_by(|(_, a), (_, b)| a.mean.partial_cmp(&b.mean).unwrap())
            .map(|(i, _)| i);
        if let Some(i) = best_idx {
            rows[i].best = true;
        }
    }

    Ok(MergedReport { sources, rows })
}

/// Run `report` and write merged.csv / merged.json under `out_dir`.
pub fn report_to_dir(
    run_dirs: &[impl AsRef<Path>],
    out_dir: impl AsRef<Path>,
) -> Result<MergedReport, ExperimentError> {
    let merged = report(run_dirs)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("merged.csv"), merged.to_csv())?;
    std::fs::write(
        out_dir.join("merged.json"),
        serde_json::to_string_pretty(&merged).expect("json"),
    )?;
    Ok(merged)
}
