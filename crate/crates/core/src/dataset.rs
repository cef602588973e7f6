//! Ranking datasets: LibSVM-format ingestion, synthetic generation with a
//! deterministic nonlinear teacher, query-level splitting, and feature
//! standardization.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

/// Default maximum relevance grade (5-grade judgments, 0..=4).
pub const DEFAULT_Y_MAX: u32 = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: grade {grade} outside [0, {y_max}]")]
    GradeOutOfRange { line: usize, grade: i64, y_max: u32 },
    #[error("{0}")]
    Validation(String),
    #[error("split needs {needed} query groups but dataset has {got}")]
    TooFewGroups { needed: usize, got: usize },
}

/// One query-document pair: a dense feature vector and a graded relevance label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub features: Vec<f64>,
    pub label: u32,
}

/// All candidate documents of one query, in file/generation order.
/// Order here carries no position semantics; positions come from a logging policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub documents: Vec<Document>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub groups: Vec<QueryGroup>,
    pub dim: usize,
    pub y_max: u32,
}

impl Dataset {
    pub fn num_queries(&self) -> usize {
        self.groups.len()
    }

    pub fn num_documents(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Metadata summary (counts, dimensionality, label histogram) as JSON.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut hist = vec![0u64; self.y_max as usize + 1];
        for g in &self.groups {
            for d in &g.documents {
                hist[d.label as usize] += 1;
            }
        }
        serde_json::json!({
            "num_queries": self.num_queries(),
            "num_documents": self.num_documents(),
            "dim": self.dim,
            "y_max": self.y_max,
            "label_histogram": hist,
        })
    }
}

/// Configuration for the synthetic graded-relevance generator.
///
/// Labels come from a fixed nonlinear teacher scored over i.i.d. standard
/// normal features, cut into grades 0..=4 at global score quantiles, so every
/// label is a deterministic function of the features given `teacher_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub dim: usize,
    pub teacher_seed: u64,
    /// Four strictly increasing cut points in (0,1): mass fractions below
    /// grades 1..=4.
    pub grade_quantiles: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_queries: 100,
            docs_per_query: 20,
            dim: 32,
            teacher_seed: 7,
            grade_quantiles: [0.5, 0.75, 0.9, 0.97],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_queries == 0 || self.docs_per_query == 0 || self.dim == 0 {
            return Err(DatasetError::Validation(
                "num_queries, docs_per_query and dim must be positive".into(),
            ));
        }
        let q = &self.grade_quantiles;
        let increasing = q.windows(2).all(|w| w[0] < w[1]);
        if !increasing || q[0] <= 0.0 || q[3] >= 1.0 {
            return Err(DatasetError::Validation(
                "grade_quantiles must be strictly increasing within (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Parse LibSVM-ranking text (`<grade> qid:<id> <idx>:<val> ...`) with the
/// default grade ceiling of 4.
pub fn parse_libsvm_ranking(text: &str) -> Result<Dataset, DatasetError> {
    parse_libsvm_ranking_with(text, DEFAULT_Y_MAX)
}

/// Parse LibSVM-ranking text with an explicit grade ceiling.
///
/// Documents are grouped by qid in first-appearance order; feature indices are
/// 1-based and may be sparse, missing entries default to 0.0; `dim` is the
/// maximum index seen anywhere in the input.
pub fn parse_libsvm_ranking_with(text: &str, y_max: u32) -> Result<Dataset, DatasetError> {
    struct SparseDoc {
        label: u32,
        pairs: Vec<(usize, f64)>,
    }
    let mut group_order: Vec<String> = Vec::new();
    let mut by_qid: HashMap<String, Vec<SparseDoc>> = HashMap::new();
    let mut dim = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();

        let grade_tok = tokens.next().ok_or_else(|| DatasetError::Parse {
            line: line_no,
            msg: "missing grade".into(),
        })?;
        let grade: i64 = grade_tok.parse().map_err(|_| DatasetError::Parse {
            line: line_no,
            msg: format!("invalid grade `{grade_tok}`"),
        })?;
        if grade < 0 || grade > y_max as i64 {
            return Err(DatasetError::GradeOutOfRange {
                line: line_no,
                grade,
                y_max,
            });
        }

        let qid_tok = tokens.next().ok_or_else(|| DatasetError::Parse {
            line: line_no,
            msg: "missing qid field".into(),
        })?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|q| !q.is_empty())
            .ok_or_else(|| DatasetError::Parse {
                line: line_no,
                msg: format!("expected `qid:<id>`, got `{qid_tok}`"),
            })?;

        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (i_str, v_str) = tok.split_once(':').ok_or_else(|| DatasetError::Parse {
                line: line_no,
                msg: format!("expected `<idx>:<val>`, got `{tok}`"),
            })?;
            let i: usize = i_str.parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                msg: format!("invalid feature index `{i_str}`"),
            })?;
            if i == 0 {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: "feature indices are 1-based".into(),
                });
            }
            let v: f64 = v_str.parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                msg: format!("invalid feature value `{v_str}`"),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("non-finite feature value `{v_str}`"),
                });
            }
            if pairs.iter().any(|&(j, _)| j == i) {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("duplicate feature index {i}"),
                });
            }
            dim = dim.max(i);
            pairs.push((i, v));
        }

        if !by_qid.contains_key(qid) {
            group_order.push(qid.to_string());
        }
        by_qid.entry(qid.to_string()).or_default().push(SparseDoc {
            label: grade as u32,
            pairs,
        });
    }

    let groups = group_order
        .into_iter()
        .map(|qid| {
            let docs = by_qid
                .remove(&qid)
                .unwrap()
                .into_iter()
                .map(|sd| {
                    let mut features = vec![0.0; dim];
                    for (i, v) in sd.pairs {
                        features[i - 1] = v;
                    }
                    Document {
                        features,
                        label: sd.label,
                    }
                })
                .collect();
            QueryGroup {
                query_id: qid,
                documents: docs,
            }
        })
        .collect();

    Ok(Dataset {
        groups,
        dim,
        y_max,
    })
}

/// Serialize back to LibSVM-ranking text. All `dim` features are written
/// explicitly so parsing the output reproduces the dataset exactly.
pub fn to_libsvm(dataset: &Dataset) -> String {
    let mut out = String::new();
    for g in &dataset.groups {
        for d in &g.documents {
            let _ = write!(out, "{} qid:{}", d.label, g.query_id);
            for (i, v) in d.features.iter().enumerate() {
                let _ = write!(out, " {}:{}", i + 1, v);
            }
            out.push('\n');
        }
    }
    out
}

/// Teacher network used by the synthetic generator: one tanh hidden layer of
/// width 16 with weights drawn from a dedicated substream of `teacher_seed`.
const TEACHER_HIDDEN: usize = 16;

// Sharp pre-activations (std ~3) push the tanh units into their saturated
// plateaus, so the score surface is genuinely nonlinear and a student network
// cannot recover it perfectly from the features alone.
fn teacher_weights(seed: u64, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let mut rng = substream(seed, 1);
    let scale_in = 3.0 / (dim as f64).sqrt();
    let w1: Vec<f64> = (0..dim * TEACHER_HIDDEN)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale_in)
        .collect();
    let b1: Vec<f64> = (0..TEACHER_HIDDEN)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let scale_h = (1.0 / TEACHER_HIDDEN as f64).sqrt();
    let w2: Vec<f64> = (0..TEACHER_HIDDEN)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale_h)
        .collect();
    let b2 = rng.sample::<f64, _>(StandardNormal) * 0.1;
    (w1, b1, w2, b2)
}

/// Teacher score for one feature vector. Exposed so tests can re-derive every
/// label from features alone.
pub fn teacher_score(cfg: &SynthConfig, features: &[f64]) -> f64 {
    let (w1, b1, w2, b2) = teacher_weights(cfg.teacher_seed, cfg.dim);
    let mut score = b2;
    for h in 0..TEACHER_HIDDEN {
        let mut z = b1[h];
        for (j, &x) in features.iter().enumerate() {
            z += x * w1[j * TEACHER_HIDDEN + h];
        }
        score += w2[h] * z.tanh();
    }
    score
}

/// Grade cut values for a score sample: `cuts[k]` is the score at the
/// `grade_quantiles[k]` order statistic; a document's grade is the number of
/// cuts at or below its score.
pub fn grade_cuts(scores: &[f64], quantiles: &[f64; 4]) -> [f64; 4] {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut cuts = [0.0; 4];
    for (k, &q) in quantiles.iter().enumerate() {
        let idx = ((q * n as f64).floor() as usize).min(n - 1);
        cuts[k] = sorted[idx];
    }
    cuts
}

pub fn grade_for_score(score: f64, cuts: &[f64; 4]) -> u32 {
    cuts.iter().filter(|&&c| score >= c).count() as u32
}

/// Generate a synthetic dataset. Deterministic: the same config always
/// produces bit-identical output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let (w1, b1, w2, b2) = teacher_weights(cfg.teacher_seed, cfg.dim);
    let mut feat_rng = substream(cfg.teacher_seed, 0);

    let total = cfg.num_queries * cfg.docs_per_query;
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut scores: Vec<f64> = Vec::with_capacity(total);
    for _ in 0..total {
        let x: Vec<f64> = (0..cfg.dim)
            .map(|_| feat_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut s = b2;
        for h in 0..TEACHER_HIDDEN {
            let mut z = b1[h];
            for (j, &xj) in x.iter().enumerate() {
                z += xj * w1[j * TEACHER_HIDDEN + h];
            }
            s += w2[h] * z.tanh();
        }
        features.push(x);
        scores.push(s);
    }

    let cuts = grade_cuts(&scores, &cfg.grade_quantiles);
    let mut docs = features.into_iter().zip(scores).map(|(f, s)| Document {
        features: f,
        label: grade_for_score(s, &cuts),
    });

    let mut groups = Vec::with_capacity(cfg.num_queries);
    for q in 0..cfg.num_queries {
        groups.push(QueryGroup {
            query_id: format!("q{q}"),
            documents: docs.by_ref().take(cfg.docs_per_query).collect(),
        });
    }

    Ok(Dataset {
        groups,
        dim: cfg.dim,
        y_max: DEFAULT_Y_MAX,
    })
}

/// Shuffle query groups by `seed` and partition into (train, valid, test).
///
/// Sizing rule: floor each `ratio * N`, then hand out remainders one by one to
/// nonzero-ratio partitions in train, valid, test order.
pub fn split(
    dataset: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DatasetError::Validation(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let n = dataset.groups.len();
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonzero {
        return Err(DatasetError::TooFewGroups {
            needed: nonzero,
            got: n,
        });
    }

    let mut counts = [0usize; 3];
    for (i, &r) in ratios.iter().enumerate() {
        counts[i] = (r * n as f64).floor() as usize;
    }
    let mut remainder = n - counts.iter().sum::<usize>();
    for (i, &r) in ratios.iter().enumerate() {
        if remainder == 0 {
            break;
        }
        if r > 0.0 {
            counts[i] += 1;
            remainder -= 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, 0);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let take = |range: std::ops::Range<usize>| -> Dataset {
        Dataset {
            groups: order[range]
                .iter()
                .map(|&i| dataset.groups[i].clone())
                .collect(),
            dim: dataset.dim,
            y_max: dataset.y_max,
        }
    };
    let a = counts[0];
    let b = counts[0] + counts[1];
    Ok((take(0..a), take(a..b), take(b..n)))
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub mean: Vec<f64>,
    /// Multiplier per feature; 0.0 for (near-)constant features, which maps
    /// them to exactly 0 after centering.
    pub scale: Vec<f64>,
}

impl FeatureTransform {
    pub fn identity(dim: usize) -> Self {
        FeatureTransform {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(train: &Dataset) -> Result<Self, DatasetError> {
        let n = train.num_documents();
        if n == 0 {
            return Err(DatasetError::Validation(
                "cannot fit feature transform on an empty dataset".into(),
            ));
        }
        let dim = train.dim;
        let mut mean = vec![0.0; dim];
        for g in &train.groups {
            for d in &g.documents {
                for (j, &v) in d.features.iter().enumerate() {
                    mean[j] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for g in &train.groups {
            for d in &g.documents {
                for (j, &v) in d.features.iter().enumerate() {
                    let c = v - mean[j];
                    var[j] += c * c;
                }
            }
        }
        let scale = var
            .iter()
            .map(|&v| {
                let sd = (v / n as f64).sqrt();
                if sd < 1e-12 {
                    0.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Ok(FeatureTransform { mean, scale })
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let groups = dataset
            .groups
            .iter()
            .map(|g| QueryGroup {
                query_id: g.query_id.clone(),
                documents: g
                    .documents
                    .iter()
                    .map(|d| Document {
                        features: d
                            .features
                            .iter()
                            .enumerate()
                            .map(|(j, &v)| (v - self.mean[j]) * self.scale[j])
                            .collect(),
                        label: d.label,
                    })
                    .collect(),
            })
            .collect();
        Dataset {
            groups,
            dim: dataset.dim,
            y_max: dataset.y_max,
        }
    }
}

/// Fit a standardizer on `train` and return it with the transformed train set.
pub fn normalize_features(train: &Dataset) -> Result<(FeatureTransform, Dataset), DatasetError> {
    let t = FeatureTransform::fit(train)?;
    let applied = t.apply(train);
    Ok((t, applied))
}
