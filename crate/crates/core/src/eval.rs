//! Ranking-quality measurement: NDCG@k against graded labels, IPS-NDCG
//! against clicks with inverse-propensity gains, propensity estimation from
//! click logs, and paired significance tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clicksim::ClickLog;
use crate::dataset::{Dataset, QueryGroup};
use crate::models::{ModelError, TrainedModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels must be finite and >= 0, got {0}")]
    BadLabel(f64),
    #[error("k must be >= 1")]
    BadK,
    #[error("samples have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("paired test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("click log is empty")]
    EmptyLog,
    #[error("no clicks at position 1; cannot normalize propensities")]
    ZeroTopRate,
    #[error("click log and dataset are misaligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rank order for descending scores with ties broken by document index.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

fn dcg_exponential(grades_in_rank_order: &[f64], k: usize) -> f64 {
    grades_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &y)| (2f64.powf(y) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k with exponential gains (2^y - 1) and log2(rank+1) discounts over
/// grades listed in predicted rank order. All-zero grades give 0.0 and the
/// query still counts toward any mean.
pub fn ndcg_at_k(grades_in_rank_order: &[f64], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::BadK);
    }
    if let Some(&bad) = grades_in_rank_order
        .iter()
        .find(|&&y| !y.is_finite() || y < 0.0)
    {
        return Err(EvalError::BadLabel(bad));
    }
    let dcg = dcg_exponential(grades_in_rank_order, k);
    let mut ideal = grades_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = dcg_exponential(&ideal, k);
    if idcg == 0.0 {
        Ok(0.0)
    } else {
        Ok(dcg / idcg)
    }
}

fn dcg_linear(gains_in_rank_order: &[f64], k: usize) -> f64 {
    gains_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k over arbitrary nonnegative gains with weight 1/log2(rank+1);
/// all-zero gains give 0.0.
fn ndcg_linear(gains_in_rank_order: &[f64], k: usize) -> f64 {
    let dcg = dcg_linear(gains_in_rank_order, k);
    let mut ideal = gains_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = dcg_linear(&ideal, k);
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query_id: String,
    pub value: f64,
}

/// A significance comparison against a named baseline report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub delta: f64,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub k: usize,
    pub per_query: Vec<PerQuery>,
    pub mean: f64,
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn from_values(metric: &str, k: usize, per_query: Vec<PerQuery>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(|p| p.value).sum::<f64>() / per_query.len() as f64
        };
        EvalReport {
            metric: metric.to_string(),
            k,
            per_query,
            mean,
            comparisons: Vec::new(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_query.iter().map(|p| p.value).collect()
    }

    /// Attach a paired significance comparison against another report over
    /// the same queries.
    pub fn compare_against(
        &mut self,
        baseline_name: &str,
        baseline: &EvalReport,
        alpha: f64,
    ) -> Result<(), EvalError> {
        let a = self.values();
        let b = baseline.values();
        let test = paired_t_test(&a, &b, alpha)?;
        self.comparisons.push(Comparison {
            baseline: baseline_name.to_string(),
            delta: self.mean - baseline.mean,
            t: test.t,
            p: test.p,
            significant: test.significant,
        });
        Ok(())
    }

    /// One row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,value\n");
        for p in &self.per_query {
            let _ = writeln!(out, "{},{}", p.query_id, p.value);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "metric": self.metric,
            "k": self.k,
            "num_queries": self.per_query.len(),
            "mean": self.mean,
            "comparisons": self.comparisons,
        })
    }
}

/// Mean NDCG@k of a per-query scorer against the dataset's true labels.
pub fn mean_ndcg_with<F>(dataset: &Dataset, k: usize, mut scorer: F) -> Result<EvalReport, EvalError>
where
    F: FnMut(&QueryGroup) -> Result<Vec<f64>, EvalError>,
{
    let mut per_query = Vec::with_capacity(dataset.groups.len());
    for g in &dataset.groups {
        let scores = scorer(g)?;
        if scores.len() != g.len() {
            return Err(EvalError::LengthMismatch(scores.len(), g.len()));
        }
        let order = rank_by_scores(&scores);
        let ranked: Vec<f64> = order.iter().map(|&i| g.documents[i].label as f64).collect();
        per_query.push(PerQuery {
            query_id: g.query_id.clone(),
            value: ndcg_at_k(&ranked, k)?,
        });
    }
    Ok(EvalReport::from_values(&format!("ndcg@{k}"), k, per_query))
}

/// Mean NDCG@k of a model's relevance tower.
pub fn mean_ndcg(
    model: &mut TrainedModel,
    dataset: &Dataset,
    k: usize,
) -> Result<EvalReport, EvalError> {
    mean_ndcg_with(dataset, k, |g| Ok(model.predict_relevance_group(g)?))
}

/// Per-position examination propensities estimated from click rates,
/// normalized to 1.0 at position 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    /// values[p-1] is the propensity of position p.
    pub values: Vec<f64>,
    pub impressions: Vec<u64>,
    pub clicks: Vec<u64>,
    /// Positions that had zero impressions and were defaulted to 1.0.
    pub defaulted: Vec<bool>,
}

impl PropensityTable {
    /// Propensity of a (1-based) position; positions beyond the table clamp
    /// to its last entry.
    pub fn value(&self, position: u32) -> f64 {
        let idx = (position.max(1) as usize - 1).min(self.values.len() - 1);
        self.values[idx]
    }

    /// Exact PBM table 1, 1/2, ..., 1/n.
    pub fn reciprocal(n: usize) -> Self {
        PropensityTable {
            values: (1..=n).map(|p| 1.0 / p as f64).collect(),
            impressions: vec![0; n],
            clicks: vec![0; n],
            defaulted: vec![false; n],
        }
    }
}

/// Estimate propensities as click rates per position over the whole log,
/// normalized by the rate at position 1.
pub fn estimate_propensities(log: &ClickLog) -> Result<PropensityTable, EvalError> {
    let max_pos = log
        .records
        .iter()
        .flat_map(|r| r.positions.iter())
        .max()
        .copied()
        .ok_or(EvalError::EmptyLog)? as usize;
    let mut impressions = vec![0u64; max_pos];
    let mut clicks = vec![0u64; max_pos];
    for rec in &log.records {
        for (&p, &c) in rec.positions.iter().zip(&rec.clicks) {
            impressions[p as usize - 1] += 1;
            clicks[p as usize - 1] += c as u64;
        }
    }
    if impressions[0] == 0 || clicks[0] == 0 {
        return Err(EvalError::ZeroTopRate);
    }
    let top_rate = clicks[0] as f64 / impressions[0] as f64;
    let mut values = vec![1.0; max_pos];
    let mut defaulted = vec![false; max_pos];
    for p in 0..max_pos {
        if impressions[p] == 0 {
            defaulted[p] = true;
        } else {
            // clickless positions get a half-click pseudo-count so the table
            // stays inside (0, 1]
            let rate = (clicks[p] as f64).max(0.5) / impressions[p] as f64;
            values[p] = (rate / top_rate).min(1.0);
        }
    }
    Ok(PropensityTable {
        values,
        impressions,
        clicks,
        defaulted,
    })
}

/// IPS-NDCG@k of a scorer on a click log: each document's gain is
/// click / propensity(logged position), ranked by model score with
/// 1/log2(rank+1) weights, normalized by the ideal ordering of the same
/// gains. Records with no clicks score 0.0 and still count.
pub fn ips_ndcg_with<F>(
    clicklog: &ClickLog,
    dataset: &Dataset,
    propensities: &PropensityTable,
    k: usize,
    mut scorer: F,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(&QueryGroup) -> Result<Vec<f64>, EvalError>,
{
    if k == 0 {
        return Err(EvalError::BadK);
    }
    let by_id: std::collections::HashMap<&str, usize> = dataset
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.query_id.as_str(), i))
        .collect();
    let multi_session = clicklog.provenance.sessions > 1;
    let mut per_query = Vec::with_capacity(clicklog.records.len());
    for rec in &clicklog.records {
        let &gi = by_id
            .get(rec.query_id.as_str())
            .ok_or_else(|| EvalError::Misaligned(format!("query `{}` not in dataset", rec.query_id)))?;
        let group = &dataset.groups[gi];
        if rec.positions.len() != group.documents.len() {
            return Err(EvalError::Misaligned(format!(
                "query `{}`: {} positions vs {} documents",
                rec.query_id,
                rec.positions.len(),
                group.documents.len()
            )));
        }
        let scores = scorer(group)?;
        if scores.len() != group.len() {
            return Err(EvalError::LengthMismatch(scores.len(), group.len()));
        }
        let order = rank_by_scores(&scores);
        let gains: Vec<f64> = order
            .iter()
            .map(|&i| {
                if rec.clicks[i] == 0 {
                    0.0
                } else {
                    rec.clicks[i] as f64 / propensities.value(rec.positions[i])
                }
            })
            .collect();
        let id = if multi_session {
            format!("{}#{}", rec.query_id, rec.session)
        } else {
            rec.query_id.clone()
        };
        per_query.push(PerQuery {
            query_id: id,
            value: ndcg_linear(&gains, k),
        });
    }
    Ok(EvalReport::from_values(
        &format!("ips-ndcg@{k}"),
        k,
        per_query,
    ))
}

/// IPS-NDCG@k of a model's relevance tower.
pub fn ips_ndcg_at_k(
    model: &mut TrainedModel,
    clicklog: &ClickLog,
    dataset: &Dataset,
    propensities: &PropensityTable,
    k: usize,
) -> Result<EvalReport, EvalError> {
    ips_ndcg_with(clicklog, dataset, propensities, k, |g| {
        Ok(model.predict_relevance_group(g)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on per-query differences. Zero-variance
/// differences degenerate to p=0 (nonzero mean) or p=1 (zero mean).
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult {
                t: 0.0,
                p: 1.0,
                significant: false,
            }
        } else {
            TTestResult {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                significant: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let p = student_t_two_sided_p(t, (n - 1) as f64);
    Ok(TTestResult {
        t,
        p,
        significant: p < alpha,
    })
}

/// Two-sided p-value of a t statistic: I_{v/(v+t^2)}(v/2, 1/2).
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// ln Gamma(x) for x > 0 (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the regularized incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}
