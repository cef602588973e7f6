//! Two-tower unbiased learning-to-rank with relevance/bias disentangling.
//!
//! The pipeline runs end to end on synthetic data: generate a graded-relevance
//! dataset, log positions under a parameterized logging policy, simulate
//! position-biased clicks, train click models (single-tower, two-tower
//! additive, gradient-reversal, observation-dropout), and score the relevance
//! tower with ranking metrics.

pub mod clicksim;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod nnkernel;
pub mod policy;
pub mod rng;

pub use clicksim::{ClickLog, ClickModelConfig, ClickRecord};
pub use dataset::{Dataset, Document, FeatureTransform, QueryGroup, SynthConfig};
pub use eval::{EvalReport, PropensityTable, TTestResult};
pub use models::{AdvLabel, ModelSpec, TrainConfig, TrainedModel, Variant};
pub use policy::{LoggedQuery, LoggingPolicy};
