//! Position-based click model (PBM) simulation: a click requires the position
//! to be examined (probability 1/p) and the document to be judged relevant
//! (a noisy function of its grade).

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::policy::{LoggedQuery, LoggingPolicy, PolicyError};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum ClickError {
    #[error("position must be >= 1, got {0}")]
    BadPosition(u32),
    #[error("grade {grade} outside [0, {y_max}]")]
    BadGrade { grade: u32, y_max: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("click log and dataset are misaligned: {0}")]
    Misaligned(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad click log line {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Click model parameters: noise floor epsilon and the grade ceiling used by
/// the relevance term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickModelConfig {
    pub epsilon: f64,
    pub y_max: u32,
    pub seed: u64,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        ClickModelConfig {
            epsilon: 0.1,
            y_max: 4,
            seed: 0,
        }
    }
}

impl ClickModelConfig {
    pub fn validate(&self) -> Result<(), ClickError> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(ClickError::Invalid(format!(
                "epsilon must be in [0,1), got {}",
                self.epsilon
            )));
        }
        if self.y_max < 1 {
            return Err(ClickError::Invalid("y_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// P(examine | position) = 1/p.
pub fn observation_prob(p: u32) -> Result<f64, ClickError> {
    if p < 1 {
        return Err(ClickError::BadPosition(p));
    }
    Ok(1.0 / p as f64)
}

/// P(relevant | grade) = eps + (1-eps) * (2^y - 1) / (2^y_max - 1).
pub fn relevance_prob(y: u32, cfg: &ClickModelConfig) -> Result<f64, ClickError> {
    if y > cfg.y_max {
        return Err(ClickError::BadGrade {
            grade: y,
            y_max: cfg.y_max,
        });
    }
    let gain = (2f64.powi(y as i32) - 1.0) / (2f64.powi(cfg.y_max as i32) - 1.0);
    Ok(cfg.epsilon + (1.0 - cfg.epsilon) * gain)
}

/// P(click | grade, position) under the PBM: examination times relevance.
pub fn click_prob(y: u32, p: u32, cfg: &ClickModelConfig) -> Result<f64, ClickError> {
    Ok(observation_prob(p)? * relevance_prob(y, cfg)?)
}

/// Clicks for one simulated session of one query. `clicks[i]` belongs to
/// document i of the query (not to rank i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub query_id: String,
    pub session: u32,
    pub positions: Vec<u32>,
    pub clicks: Vec<u8>,
}

/// Everything that determined a click log's bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy: LoggingPolicy,
    pub click_config: ClickModelConfig,
    pub sessions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickLog {
    pub provenance: Provenance,
    pub records: Vec<ClickRecord>,
}

impl ClickLog {
    pub fn total_clicks(&self) -> u64 {
        self.records
            .iter()
            .map(|r| r.clicks.iter().map(|&c| c as u64).sum::<u64>())
            .sum()
    }

    pub fn total_impressions(&self) -> u64 {
        self.records.iter().map(|r| r.clicks.len() as u64).sum()
    }

    /// Line-delimited JSON: a provenance header line, then one record per
    /// query session.
    pub fn write_ldjson(&self, mut w: impl Write) -> Result<(), ClickError> {
        let header = serde_json::json!({
            "kind": "clicklog",
            "version": 1,
            "provenance": self.provenance,
            "num_records": self.records.len(),
        });
        writeln!(w, "{header}")?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_ldjson(r: impl BufRead) -> Result<Self, ClickError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| ClickError::Invalid("empty click log".into()))??;
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            version: u32,
            provenance: Provenance,
        }
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| ClickError::BadRecord {
                line: 1,
                source: e,
            })?;
        if header.kind != "clicklog" || header.version != 1 {
            return Err(ClickError::Invalid(format!(
                "unsupported click log header: kind={} version={}",
                header.kind, header.version
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClickRecord =
                serde_json::from_str(&line).map_err(|e| ClickError::BadRecord {
                    line: i + 2,
                    source: e,
                })?;
            if rec.positions.len() != rec.clicks.len() {
                return Err(ClickError::Invalid(format!(
                    "record {} has {} positions but {} clicks",
                    rec.query_id,
                    rec.positions.len(),
                    rec.clicks.len()
                )));
            }
            LoggedQuery::from_positions(rec.query_id.clone(), rec.positions.clone())?;
            records.push(rec);
        }
        Ok(ClickLog {
            provenance: header.provenance,
            records,
        })
    }
}

/// Sample one session of Bernoulli clicks per query. Each query draws from an
/// independent substream keyed by (cfg.seed, query index).
pub fn sample_clicks(
    logged: &[LoggedQuery],
    dataset: &Dataset,
    cfg: &ClickModelConfig,
    policy: &LoggingPolicy,
) -> Result<ClickLog, ClickError> {
    sample_clicks_sessions(logged, dataset, cfg, policy, 1)
}

/// Sample `sessions` independent PBM passes over the same logged positions.
pub fn sample_clicks_sessions(
    logged: &[LoggedQuery],
    dataset: &Dataset,
    cfg: &ClickModelConfig,
    policy: &LoggingPolicy,
    sessions: u32,
) -> Result<ClickLog, ClickError> {
    cfg.validate()?;
    if sessions == 0 {
        return Err(ClickError::Invalid("sessions must be >= 1".into()));
    }
    if logged.len() != dataset.groups.len() {
        return Err(ClickError::Misaligned(format!(
            "{} logged queries vs {} dataset groups",
            logged.len(),
            dataset.groups.len()
        )));
    }
    let mut records = Vec::with_capacity(logged.len() * sessions as usize);
    for session in 0..sessions {
        for (qi, (lq, group)) in logged.iter().zip(&dataset.groups).enumerate() {
            if lq.query_id != group.query_id {
                return Err(ClickError::Misaligned(format!(
                    "query {} is `{}` in the log but `{}` in the dataset",
                    qi, lq.query_id, group.query_id
                )));
            }
            if lq.positions.len() != group.documents.len() {
                return Err(ClickError::Misaligned(format!(
                    "query {}: {} positions vs {} documents",
                    lq.query_id,
                    lq.positions.len(),
                    group.documents.len()
                )));
            }
            let stream = (session as u64) << 32 | qi as u64;
            let mut rng = substream(cfg.seed, stream);
            let clicks = group
                .documents
                .iter()
                .zip(&lq.positions)
                .map(|(doc, &p)| {
                    let prob = click_prob(doc.label, p, cfg)?;
                    Ok(u8::from(rng.gen::<f64>() < prob))
                })
                .collect::<Result<Vec<u8>, ClickError>>()?;
            records.push(ClickRecord {
                query_id: lq.query_id.clone(),
                session,
                positions: lq.positions.clone(),
                clicks,
            });
        }
    }
    Ok(ClickLog {
        provenance: Provenance {
            policy: *policy,
            click_config: *cfg,
            sessions,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use crate::policy::{apply_policy, LoggingPolicy};

    #[test]
    fn observation_prob_is_reciprocal_position() {
        assert_eq!(observation_prob(1).unwrap(), 1.0);
        assert_eq!(observation_prob(2).unwrap(), 0.5);
        assert_eq!(observation_prob(10).unwrap(), 0.1);
        assert!(matches!(observation_prob(0), Err(ClickError::BadPosition(0))));
    }

    #[test]
    fn relevance_prob_hand_values() {
        let cfg = ClickModelConfig::default();
        assert!((relevance_prob(0, &cfg).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relevance_prob(4, &cfg).unwrap(), 1.0);
        // eps + (1-eps) * 3/15 = 0.1 + 0.9*0.2 = 0.28
        assert!((relevance_prob(2, &cfg).unwrap() - 0.28).abs() < 1e-12);
        assert!(matches!(
            relevance_prob(5, &cfg),
            Err(ClickError::BadGrade { grade: 5, .. })
        ));
    }

    #[test]
    fn click_prob_hand_values() {
        let cfg = ClickModelConfig::default();
        assert_eq!(click_prob(4, 1, &cfg).unwrap(), 1.0);
        assert!((click_prob(0, 4, &cfg).unwrap() - 0.025).abs() < 1e-12);
        assert!((click_prob(2, 2, &cfg).unwrap() - 0.14).abs() < 1e-12);
    }

    #[test]
    fn pbm_factorization_is_exact() {
        let cfg = ClickModelConfig::default();
        let y_max = cfg.y_max;
        for y in 0..=y_max {
            for p in 1..=10u32 {
                let lhs = click_prob(y, p, &cfg).unwrap();
                let rhs = click_prob(y, 1, &cfg).unwrap() * click_prob(y_max, p, &cfg).unwrap()
                    / click_prob(y_max, 1, &cfg).unwrap();
                assert_eq!(lhs, rhs, "factorization broke at y={y} p={p}");
            }
        }
    }

    #[test]
    fn click_prob_monotonicity() {
        let cfg = ClickModelConfig::default();
        for y in 0..=4u32 {
            for p in 1..10u32 {
                assert!(click_prob(y, p, &cfg).unwrap() >= click_prob(y, p + 1, &cfg).unwrap());
            }
        }
        for p in 1..=10u32 {
            for y in 0..4u32 {
                assert!(click_prob(y, p, &cfg).unwrap() <= click_prob(y + 1, p, &cfg).unwrap());
            }
        }
    }

    fn small_sim(
        epsilon: f64,
        seed: u64,
    ) -> (crate::dataset::Dataset, Vec<LoggedQuery>, ClickLog) {
        let ds = generate_synthetic(&SynthConfig {
            num_queries: 20,
            docs_per_query: 8,
            dim: 4,
            teacher_seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let policy = LoggingPolicy::new(0.5, seed).unwrap();
        let logged = apply_policy(&ds, &policy).unwrap();
        let cfg = ClickModelConfig {
            epsilon,
            y_max: 4,
            seed,
        };
        let log = sample_clicks(&logged, &ds, &cfg, &policy).unwrap();
        (ds, logged, log)
    }

    #[test]
    fn zero_epsilon_zero_labels_never_click() {
        let mut ds = generate_synthetic(&SynthConfig {
            num_queries: 10,
            docs_per_query: 5,
            dim: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        for g in &mut ds.groups {
            for d in &mut g.documents {
                d.label = 0;
            }
        }
        let policy = LoggingPolicy::new(0.0, 1).unwrap();
        let logged = apply_policy(&ds, &policy).unwrap();
        let cfg = ClickModelConfig {
            epsilon: 0.0,
            y_max: 4,
            seed: 1,
        };
        let log = sample_clicks(&logged, &ds, &cfg, &policy).unwrap();
        assert_eq!(log.total_clicks(), 0);
    }

    #[test]
    fn top_position_max_grade_always_clicks() {
        let (ds, logged, log) = small_sim(0.1, 9);
        for (rec, g) in log.records.iter().zip(&ds.groups) {
            for (i, doc) in g.documents.iter().enumerate() {
                if doc.label == 4 && rec.positions[i] == 1 {
                    assert_eq!(rec.clicks[i], 1);
                }
            }
        }
        drop(logged);
    }

    #[test]
    fn determinism_identical_logs() {
        let (_, _, a) = small_sim(0.1, 123);
        let (_, _, b) = small_sim(0.1, 123);
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_rate_matches_click_prob() {
        // y=2 at p=2 over 100k draws: within 3 sigma of 0.14.
        let cfg = ClickModelConfig::default();
        let p_true = click_prob(2, 2, &cfg).unwrap();
        let n = 100_000usize;
        let mut hits = 0u64;
        for i in 0..n {
            let mut rng = substream(cfg.seed, i as u64);
            if rng.gen::<f64>() < p_true {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        let sigma = (p_true * (1.0 - p_true) / n as f64).sqrt();
        assert!(
            (rate - p_true).abs() <= 3.0 * sigma,
            "rate {rate} vs {p_true} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn misaligned_inputs_error() {
        let (ds, logged, _) = small_sim(0.1, 5);
        let cfg = ClickModelConfig::default();
        let policy = LoggingPolicy::new(0.5, 5).unwrap();
        let err = sample_clicks(&logged[..logged.len() - 1], &ds, &cfg, &policy);
        assert!(matches!(err, Err(ClickError::Misaligned(_))));
    }

    #[test]
    fn ldjson_round_trip() {
        let (_, _, log) = small_sim(0.1, 33);
        let mut buf = Vec::new();
        log.write_ldjson(&mut buf).unwrap();
        let back = ClickLog::read_ldjson(&buf[..]).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn sessions_concatenate_independent_passes() {
        let ds = generate_synthetic(&SynthConfig {
            num_queries: 6,
            docs_per_query: 5,
            dim: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let policy = LoggingPolicy::new(0.5, 2).unwrap();
        let logged = apply_policy(&ds, &policy).unwrap();
        let cfg = ClickModelConfig::default();
        let log = sample_clicks_sessions(&logged, &ds, &cfg, &policy, 3).unwrap();
        assert_eq!(log.records.len(), 18);
        // same positions across sessions of one query, fresh clicks
        assert_eq!(log.records[0].positions, log.records[6].positions);
        assert_eq!(log.records[0].query_id, log.records[6].query_id);
    }
}
