//! Experiment configuration: a single TOML document, schema-validated with
//! unknown-key errors so config typos fail loudly instead of silently running
//! the wrong experiment.

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::models::{AdvLabel, ModelSpec, TrainConfig, TrainSeeds, Variant};
use crate::nnkernel::{OptimizerConfig, OptimizerKind};
use crate::policy::LoggingPolicy;

use super::ExperimentError;

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_split_seed() -> u64 {
    7
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    /// Standardize features on the train split and apply everywhere.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub libsvm: Option<LibsvmConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Libsvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibsvmConfig {
    /// Single file split by `split`/`split_seed`; mutually exclusive with the
    /// explicit train/valid/test trio.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub train: Option<String>,
    #[serde(default)]
    pub valid: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
    #[serde(default = "LibsvmConfig::default_y_max")]
    pub y_max: u32,
}

impl LibsvmConfig {
    fn default_y_max() -> u32 {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Preset name (oracle|l1|l2|l3|random); omit when giving `w` directly.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub w: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub noise_low: Option<f64>,
    #[serde(default)]
    pub noise_high: Option<f64>,
}

impl PolicyConfig {
    pub fn label(&self) -> String {
        match (&self.name, self.w) {
            (Some(n), _) => n.clone(),
            (None, Some(w)) => format!("w{w}"),
            (None, None) => "policy".into(),
        }
    }

    pub fn build(&self) -> Result<LoggingPolicy, ExperimentError> {
        let mut policy = match (&self.name, self.w) {
            (Some(name), None) => LoggingPolicy::preset(name, self.seed)
                .map_err(|e| ExperimentError::Config(e.to_string()))?,
            (None, Some(w)) => LoggingPolicy::new(w, self.seed)
                .map_err(|e| ExperimentError::Config(e.to_string()))?,
            (Some(_), Some(_)) => {
                return Err(ExperimentError::Config(
                    "policy: give either `name` or `w`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ExperimentError::Config(
                    "policy: one of `name` or `w` is required".into(),
                ))
            }
        };
        if let Some(lo) = self.noise_low {
            policy.noise_low = lo;
        }
        if let Some(hi) = self.noise_high {
            policy.noise_high = hi;
        }
        policy
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClicksConfig {
    #[serde(default = "ClicksConfig::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "LibsvmConfig::default_y_max")]
    pub y_max: u32,
    pub seed: u64,
    /// Independent click passes over the train split.
    #[serde(default = "ClicksConfig::default_sessions")]
    pub sessions: u32,
    /// Click passes over the test split (for IPS-NDCG evaluation).
    #[serde(default = "ClicksConfig::default_sessions")]
    pub eval_sessions: u32,
}

impl ClicksConfig {
    fn default_epsilon() -> f64 {
        0.1
    }

    fn default_sessions() -> u32 {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub variant: Variant,
    #[serde(default)]
    pub relevance_tower: Option<Vec<usize>>,
    #[serde(default)]
    pub observation_tower: Option<Vec<usize>>,
    #[serde(default)]
    pub position_embedding_dim: Option<usize>,
    #[serde(default)]
    pub max_position: Option<usize>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub adv_label: Option<AdvLabel>,
}

impl ModelConfig {
    pub fn to_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.variant);
        if let Some(v) = &self.relevance_tower {
            spec.relevance_tower = v.clone();
        }
        if let Some(v) = &self.observation_tower {
            spec.observation_tower = v.clone();
        }
        if let Some(v) = self.position_embedding_dim {
            spec.position_embedding_dim = v;
        }
        if let Some(v) = self.max_position {
            spec.max_position = v;
        }
        if let Some(v) = self.eta {
            spec.eta = v;
        }
        if let Some(v) = self.tau {
            spec.tau = v;
        }
        if let Some(v) = self.adv_label {
            spec.adv_label = v;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainSection::default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "TrainSection::default_lr")]
    pub lr: f64,
    #[serde(default = "TrainSection::default_patience")]
    pub patience: usize,
    #[serde(default = "TrainSection::default_init_seed")]
    pub init_seed: u64,
    #[serde(default = "TrainSection::default_shuffle_seed")]
    pub shuffle_seed: u64,
    #[serde(default = "TrainSection::default_dropout_seed")]
    pub dropout_seed: u64,
}

impl TrainSection {
    fn default_epochs() -> usize {
        100
    }
    fn default_batch_size() -> usize {
        256
    }
    fn default_optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_patience() -> usize {
        10
    }
    fn default_init_seed() -> u64 {
        1
    }
    fn default_shuffle_seed() -> u64 {
        2
    }
    fn default_dropout_seed() -> u64 {
        3
    }

    /// Concrete train config for one repetition seed.
    pub fn for_repetition(&self, rep_seed: u64) -> TrainConfig {
        use crate::rng::mix;
        let optimizer = match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            seeds: TrainSeeds {
                init: mix(self.init_seed, rep_seed),
                shuffle: mix(self.shuffle_seed, rep_seed),
                dropout: mix(self.dropout_seed, rep_seed),
            },
            patience: self.patience,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: Self::default_epochs(),
            batch_size: Self::default_batch_size(),
            optimizer: Self::default_optimizer(),
            lr: Self::default_lr(),
            patience: Self::default_patience(),
            init_seed: Self::default_init_seed(),
            shuffle_seed: Self::default_shuffle_seed(),
            dropout_seed: Self::default_dropout_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "EvalSection::default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "EvalSection::default_alpha")]
    pub alpha: f64,
    /// Model name used as the significance baseline.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl EvalSection {
    fn default_ks() -> Vec<usize> {
        vec![5]
    }
    fn default_alpha() -> f64 {
        0.05
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: Self::default_ks(),
            alpha: Self::default_alpha(),
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub policies: Vec<PolicyConfig>,
    pub clicks: ClicksConfig,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        match self.dataset.source {
            DatasetSource::Synthetic => {
                let synth = self.dataset.synthetic.as_ref().ok_or_else(|| {
                    ExperimentError::Config("dataset.synthetic section is required".into())
                })?;
                synth
                    .validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
            DatasetSource::Libsvm => {
                let lib = self.dataset.libsvm.as_ref().ok_or_else(|| {
                    ExperimentError::Config("dataset.libsvm section is required".into())
                })?;
                let single = lib.path.is_some();
                let trio = lib.train.is_some() || lib.valid.is_some() || lib.test.is_some();
                if single == trio {
                    return Err(ExperimentError::Config(
                        "dataset.libsvm: give either `path` or the train/valid/test trio".into(),
                    ));
                }
                if trio && (lib.train.is_none() || lib.valid.is_none() || lib.test.is_none()) {
                    return Err(ExperimentError::Config(
                        "dataset.libsvm: train, valid and test are all required".into(),
                    ));
                }
            }
        }
        let sum: f64 = self.dataset.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.dataset.split.iter().any(|&r| r < 0.0) {
            return Err(ExperimentError::Config(format!(
                "dataset.split must be nonnegative and sum to 1, got {:?}",
                self.dataset.split
            )));
        }
        if self.policies.is_empty() {
            return Err(ExperimentError::Config("at least one policy is required".into()));
        }
        for p in &self.policies {
            p.build()?;
        }
        if self.models.is_empty() {
            return Err(ExperimentError::Config("at least one model is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return Err(ExperimentError::Config(format!(
                    "duplicate model name `{}`",
                    m.name
                )));
            }
            m.to_spec()
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if let Some(base) = &self.eval.baseline {
            if !self.models.iter().any(|m| &m.name == base) {
                return Err(ExperimentError::Config(format!(
                    "eval.baseline `{base}` is not a configured model"
                )));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(ExperimentError::Config("eval.ks must be nonempty and >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.alpha) {
            return Err(ExperimentError::Config(format!(
                "eval.alpha must be in [0,1], got {}",
                self.eval.alpha
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(ExperimentError::Config("run.seeds must be nonempty".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(ExperimentError::Config(
                "train.epochs and train.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter swept over a grid of values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Eta,
    Tau,
    PolicyW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sweep: SweepSection,
    pub base: ExperimentConfig,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: SweepConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.base.validate()?;
        if self.sweep.grid.is_empty() {
            return Err(ExperimentError::Config("sweep.grid must be nonempty".into()));
        }
        match self.sweep.parameter {
            SweepParameter::Eta => {
                if self.sweep.grid.iter().any(|&v| v < 0.0) {
                    return Err(ExperimentError::Config("eta grid values must be >= 0".into()));
                }
                if !self.base.models.iter().any(|m| m.variant.uses_gradrev()) {
                    return Err(ExperimentError::Config(
                        "eta sweep needs at least one gradrev-variant model".into(),
                    ));
                }
            }
            SweepParameter::Tau => {
                if self.sweep.grid.iter().any(|&v| !(0.0..1.0).contains(&v)) {
                    return Err(ExperimentError::Config("tau grid values must be in [0,1)".into()));
                }
                if !self.base.models.iter().any(|m| m.variant.uses_dropout()) {
                    return Err(ExperimentError::Config(
                        "tau sweep needs at least one drop-variant model".into(),
                    ));
                }
            }
            SweepParameter::PolicyW => {
                if self.sweep.grid.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(ExperimentError::Config(
                        "policy_w grid values must be in [0,1]".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The base config with the swept parameter set to `value`.
    pub fn instantiate(&self, value: f64) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        match self.sweep.parameter {
            SweepParameter::Eta => {
                for m in cfg.models.iter_mut().filter(|m| m.variant.uses_gradrev()) {
                    m.eta = Some(value);
                }
            }
            SweepParameter::Tau => {
                for m in cfg.models.iter_mut().filter(|m| m.variant.uses_dropout()) {
                    m.tau = Some(value);
                }
            }
            SweepParameter::PolicyW => {
                for p in cfg.policies.iter_mut() {
                    p.name = None;
                    p.w = Some(value);
                }
            }
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[dataset]
source = "synthetic"

[dataset.synthetic]
num_queries = 30
docs_per_query = 5
dim = 4
teacher_seed = 7
grade_quantiles = [0.5, 0.75, 0.9, 0.97]

[[policies]]
name = "oracle"
seed = 11

[clicks]
seed = 13

[[models]]
name = "pal"
variant = "pal"

[run]
seeds = [1]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.eval.ks, vec![5]);
        assert_eq!(cfg.policies[0].label(), "oracle");
        assert!(cfg.dataset.normalize);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[clicks]\nseed = 13", "[clicks]\nseed = 13\nbogus_key = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn baseline_must_be_a_model() {
        let bad = MINIMAL.replace("[run]", "[eval]\nbaseline = \"nope\"\n\n[run]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn policy_name_and_w_are_exclusive() {
        let bad = MINIMAL.replace("name = \"oracle\"", "name = \"oracle\"\nw = 0.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sweep_validation() {
        let base = MINIMAL;
        let sweep_toml = format!(
            "[sweep]\nparameter = \"tau\"\ngrid = [0.1, 0.3]\n\n[base]\n{}",
            base.replace("[dataset", "[base.dataset")
                .replace("[[policies]]", "[[base.policies]]")
                .replace("[clicks]", "[base.clicks]")
                .replace("[[models]]", "[[base.models]]")
                .replace("[run]", "[base.run]")
                .replace("[base]\n", "")
        );
        // pal is not a drop variant, so a tau sweep must be rejected
        let err = SweepConfig::from_toml(&sweep_toml).unwrap_err();
        assert!(err.to_string().contains("drop-variant"), "{err}");
        let ok_toml = sweep_toml.replace("variant = \"pal\"", "variant = \"drop\"");
        let sweep = SweepConfig::from_toml(&ok_toml).unwrap();
        let inst = sweep.instantiate(0.3);
        assert_eq!(inst.models[0].tau, Some(0.3));
    }
}
