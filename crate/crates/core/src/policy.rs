//! Logging policies: display positions are assigned by ranking documents on a
//! weighted sum of true relevance and uniform noise. The weight `w` is the
//! confounding knob — w=1 reproduces relevance order exactly, w=0 is
//! relevance-agnostic.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, QueryGroup};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{0}")]
    Invalid(String),
    #[error("score at document {0} is NaN")]
    NanScore(usize),
    #[error("unknown policy preset `{0}` (expected oracle|l1|l2|l3|random)")]
    UnknownPreset(String),
}

/// Weighted-sum logging policy: score = w*label + (1-w)*noise with
/// noise ~ Uniform[noise_low, noise_high).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggingPolicy {
    pub w: f64,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
}

impl LoggingPolicy {
    pub fn new(w: f64, seed: u64) -> Result<Self, PolicyError> {
        let p = LoggingPolicy {
            w,
            noise_low: 0.0,
            noise_high: 4.0,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    /// Preset policies: oracle(w=1.0), l1(0.8), l2(0.6), l3(0.2), random(0.0).
    pub fn preset(name: &str, seed: u64) -> Result<Self, PolicyError> {
        let w = match name {
            "oracle" => 1.0,
            "l1" => 0.8,
            "l2" => 0.6,
            "l3" => 0.2,
            "random" => 0.0,
            other => return Err(PolicyError::UnknownPreset(other.to_string())),
        };
        LoggingPolicy::new(w, seed)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(PolicyError::Invalid(format!(
                "policy weight w must be in [0,1], got {}",
                self.w
            )));
        }
        if !(self.noise_low < self.noise_high) {
            return Err(PolicyError::Invalid(format!(
                "noise range [{}, {}) is empty",
                self.noise_low, self.noise_high
            )));
        }
        Ok(())
    }
}

/// Positions logged for one query. `positions[i]` is the 1-based display
/// position of document i; `doc_indices[r]` is the document shown at rank r+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedQuery {
    pub query_id: String,
    pub doc_indices: Vec<usize>,
    pub positions: Vec<u32>,
}

impl LoggedQuery {
    /// Rebuild the rank->document map from per-document positions, validating
    /// that they form a permutation of 1..=n.
    pub fn from_positions(query_id: String, positions: Vec<u32>) -> Result<Self, PolicyError> {
        let n = positions.len();
        let mut doc_indices = vec![usize::MAX; n];
        for (doc, &p) in positions.iter().enumerate() {
            if p < 1 || p as usize > n || doc_indices[p as usize - 1] != usize::MAX {
                return Err(PolicyError::Invalid(format!(
                    "positions are not a permutation of 1..={n}"
                )));
            }
            doc_indices[p as usize - 1] = doc;
        }
        Ok(LoggedQuery {
            query_id,
            doc_indices,
            positions,
        })
    }
}

/// Score each document of a query: s_i = w*label_i + (1-w)*n_i, one noise
/// draw per document in document order.
pub fn score_documents(
    group: &QueryGroup,
    policy: &LoggingPolicy,
    noise_rng: &mut impl Rng,
) -> Vec<f64> {
    group
        .documents
        .iter()
        .map(|d| {
            let noise = noise_rng.gen_range(policy.noise_low..policy.noise_high);
            policy.w * d.label as f64 + (1.0 - policy.w) * noise
        })
        .collect()
}

/// Positions by descending score; ties broken by original document index.
pub fn assign_positions(scores: &[f64]) -> Result<Vec<u32>, PolicyError> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(PolicyError::NanScore(i));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut positions = vec![0u32; n];
    for (rank, &doc) in order.iter().enumerate() {
        positions[doc] = rank as u32 + 1;
    }
    Ok(positions)
}

/// Apply a logging policy to every query. Each query draws noise from its own
/// substream keyed by (policy.seed, query index), so results do not depend on
/// processing order.
pub fn apply_policy(
    dataset: &Dataset,
    policy: &LoggingPolicy,
) -> Result<Vec<LoggedQuery>, PolicyError> {
    policy.validate()?;
    dataset
        .groups
        .iter()
        .enumerate()
        .map(|(qi, group)| {
            let mut rng = substream(policy.seed, qi as u64);
            let scores = score_documents(group, policy, &mut rng);
            let positions = assign_positions(&scores)?;
            let mut doc_indices = vec![0usize; positions.len()];
            for (doc, &p) in positions.iter().enumerate() {
                doc_indices[p as usize - 1] = doc;
            }
            Ok(LoggedQuery {
                query_id: group.query_id.clone(),
                doc_indices,
                positions,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Document, SynthConfig};

    fn group_with_labels(labels: &[u32]) -> QueryGroup {
        QueryGroup {
            query_id: "q".into(),
            documents: labels
                .iter()
                .map(|&l| Document {
                    features: vec![0.0],
                    label: l,
                })
                .collect(),
        }
    }

    #[test]
    fn oracle_scores_equal_labels() {
        let g = group_with_labels(&[1, 4, 2]);
        let policy = LoggingPolicy::new(1.0, 0).unwrap();
        let mut rng = substream(0, 0);
        let scores = score_documents(&g, &policy, &mut rng);
        assert_eq!(scores, vec![1.0, 4.0, 2.0]);
    }

    #[test]
    fn random_scores_equal_noise() {
        let g = group_with_labels(&[3, 0]);
        let policy = LoggingPolicy::new(0.0, 5).unwrap();
        let mut rng = substream(5, 0);
        let scores = score_documents(&g, &policy, &mut rng);
        let mut rng = substream(5, 0);
        let noise: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..4.0)).collect();
        assert_eq!(scores, noise);
    }

    #[test]
    fn weighted_sum_hand_value() {
        // w=0.5, label 2, noise 1.0 -> 1.5
        let s = 0.5 * 2.0 + (1.0 - 0.5) * 1.0;
        assert_eq!(s, 1.5);
        let g = group_with_labels(&[2]);
        let policy = LoggingPolicy {
            w: 0.5,
            noise_low: 1.0,
            noise_high: 1.0 + 1e-12,
            seed: 0,
        };
        let mut rng = substream(0, 0);
        let scores = score_documents(&g, &policy, &mut rng);
        assert!((scores[0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn positions_by_descending_score() {
        assert_eq!(assign_positions(&[0.2, 0.9, 0.5]).unwrap(), vec![3, 1, 2]);
        assert_eq!(assign_positions(&[0.7]).unwrap(), vec![1]);
    }

    #[test]
    fn ties_break_by_document_index() {
        assert_eq!(assign_positions(&[0.5, 0.5]).unwrap(), vec![1, 2]);
        assert_eq!(assign_positions(&[1.0, 2.0, 2.0, 1.0]).unwrap(), vec![3, 1, 2, 4]);
    }

    #[test]
    fn nan_score_is_an_error() {
        assert!(matches!(
            assign_positions(&[0.1, f64::NAN]),
            Err(PolicyError::NanScore(1))
        ));
    }

    #[test]
    fn oracle_positions_non_increasing_in_label() {
        let cfg = SynthConfig {
            num_queries: 30,
            docs_per_query: 10,
            dim: 4,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let logged = apply_policy(&ds, &LoggingPolicy::new(1.0, 3).unwrap()).unwrap();
        for (lq, g) in logged.iter().zip(&ds.groups) {
            for rank in 1..lq.doc_indices.len() {
                let prev = g.documents[lq.doc_indices[rank - 1]].label;
                let cur = g.documents[lq.doc_indices[rank]].label;
                assert!(prev >= cur);
            }
        }
    }

    #[test]
    fn apply_policy_is_deterministic() {
        let cfg = SynthConfig {
            num_queries: 10,
            docs_per_query: 6,
            dim: 4,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let policy = LoggingPolicy::new(0.6, 17).unwrap();
        assert_eq!(
            apply_policy(&ds, &policy).unwrap(),
            apply_policy(&ds, &policy).unwrap()
        );
    }

    #[test]
    fn positions_are_a_permutation() {
        let cfg = SynthConfig {
            num_queries: 25,
            docs_per_query: 9,
            dim: 4,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for w in [0.0, 0.2, 0.6, 0.8, 1.0] {
            let logged = apply_policy(&ds, &LoggingPolicy::new(w, 1).unwrap()).unwrap();
            for lq in &logged {
                let mut sorted = lq.positions.clone();
                sorted.sort_unstable();
                let expect: Vec<u32> = (1..=lq.positions.len() as u32).collect();
                assert_eq!(sorted, expect);
            }
        }
    }

    #[test]
    fn random_policy_rank_of_best_doc_is_uniform() {
        // 10k queries of n=10: count the rank of the max-label document and
        // check each rank count against the multinomial 3-sigma band.
        let cfg = SynthConfig {
            num_queries: 10_000,
            docs_per_query: 10,
            dim: 4,
            teacher_seed: 2,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let logged = apply_policy(&ds, &LoggingPolicy::new(0.0, 77).unwrap()).unwrap();
        let mut counts = [0f64; 10];
        for (lq, g) in logged.iter().zip(&ds.groups) {
            let best = (0..g.len())
                .max_by(|&a, &b| {
                    g.documents[a]
                        .label
                        .cmp(&g.documents[b].label)
                        .then(b.cmp(&a))
                })
                .unwrap();
            counts[lq.positions[best] as usize - 1] += 1.0;
        }
        let n = 10_000f64;
        let p = 0.1;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (rank, &c) in counts.iter().enumerate() {
            assert!(
                (c - n * p).abs() <= 3.0 * sigma,
                "rank {}: count {} outside {} +- {}",
                rank + 1,
                c,
                n * p,
                3.0 * sigma
            );
        }
    }

    /// Kendall tau-a between negated positions and labels for one query.
    fn kendall_tau(positions: &[u32], labels: &[u32]) -> f64 {
        let n = positions.len();
        let mut num = 0i64;
        let mut den = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                // negated positions: higher rank (smaller p) should pair with
                // higher label when correlated
                let dp = -(positions[i] as i64 - positions[j] as i64);
                let dl = labels[i] as i64 - labels[j] as i64;
                num += (dp.signum() * dl.signum()) as i64;
                den += 1;
            }
        }
        num as f64 / den as f64
    }

    #[test]
    fn confounding_knob_is_monotone_in_w() {
        let cfg = SynthConfig {
            num_queries: 1000,
            docs_per_query: 10,
            dim: 4,
            teacher_seed: 5,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut taus = Vec::new();
        for w in [0.0, 0.2, 0.6, 0.8, 1.0] {
            let logged = apply_policy(&ds, &LoggingPolicy::new(w, 13).unwrap()).unwrap();
            let mean_tau: f64 = logged
                .iter()
                .zip(&ds.groups)
                .map(|(lq, g)| {
                    let labels: Vec<u32> = g.documents.iter().map(|d| d.label).collect();
                    kendall_tau(&lq.positions, &labels)
                })
                .sum::<f64>()
                / logged.len() as f64;
            taus.push(mean_tau);
        }
        for w in taus.windows(2) {
            assert!(w[1] >= w[0], "mean Kendall tau not non-decreasing: {taus:?}");
        }
    }
}
