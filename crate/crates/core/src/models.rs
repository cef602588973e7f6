//! Click-model variants and their training loop.
//!
//! Five variants share one skeleton: a relevance tower over document features
//! and, for two-tower variants, an observation tower over the logged position.
//! Click logits are f (biased) or f + g (two-tower); drop variants pass g
//! through inverted dropout during training; gradrev variants attach an
//! adversarial head to the observation tower's shared hidden representation
//! through a gradient-reversal layer, so the auxiliary task unlearns
//! relevance signal from the observation tower. Only the relevance tower is
//! used at serving time.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clicksim::ClickLog;
use crate::dataset::Dataset;
use crate::nnkernel::checkpoint::CheckpointError;
use crate::nnkernel::{
    sigmoid, sigmoid_ce, BatchNorm, Checkpoint, Dense, Dropout, Embedding, GradRev, Matrix, Mode,
    NnError, Optimizer, OptimizerConfig, Relu,
};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("variant {0:?} requires logged positions")]
    MissingPositions(Variant),
    #[error("training aborted: loss is not finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
    #[error("click log has no training examples")]
    EmptyClickLog,
    #[error("click log and dataset are misaligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Biased,
    Pal,
    GradRev,
    Drop,
    DropGradRev,
}

impl Variant {
    pub fn uses_observation(self) -> bool {
        !matches!(self, Variant::Biased)
    }

    pub fn uses_gradrev(self) -> bool {
        matches!(self, Variant::GradRev | Variant::DropGradRev)
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Variant::Drop | Variant::DropGradRev)
    }
}

/// Target supervising the adversarial head of gradrev variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLabel {
    Utility,
    Click,
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Hidden widths followed by the scalar output width, e.g. [64, 32, 1].
    pub relevance_tower: Vec<usize>,
    /// Widths of the observation tower after the position embedding.
    pub observation_tower: Vec<usize>,
    pub position_embedding_dim: usize,
    /// Positions beyond this map to the last embedding row.
    pub max_position: usize,
    /// Gradient-reversal scale; used by gradrev variants only.
    pub eta: f64,
    /// Observation dropout rate; used by drop variants only.
    pub tau: f64,
    pub adv_label: AdvLabel,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            variant,
            relevance_tower: vec![64, 32, 1],
            observation_tower: vec![16, 1],
            position_embedding_dim: 8,
            max_position: 50,
            eta: 0.6,
            tau: 0.3,
            adv_label: AdvLabel::Click,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.relevance_tower.is_empty() || *self.relevance_tower.last().unwrap() != 1 {
            return Err(ModelError::Spec(format!(
                "relevance tower widths must end in 1, got {:?}",
                self.relevance_tower
            )));
        }
        if self.relevance_tower.iter().any(|&w| w == 0) {
            return Err(ModelError::Spec("zero-width relevance layer".into()));
        }
        if self.variant.uses_observation() {
            if self.observation_tower.is_empty() || *self.observation_tower.last().unwrap() != 1 {
                return Err(ModelError::Spec(format!(
                    "observation tower widths must end in 1, got {:?}",
                    self.observation_tower
                )));
            }
            if self.observation_tower.iter().any(|&w| w == 0) {
                return Err(ModelError::Spec("zero-width observation layer".into()));
            }
            if self.position_embedding_dim == 0 || self.max_position == 0 {
                return Err(ModelError::Spec(
                    "position embedding dim and max_position must be >= 1".into(),
                ));
            }
        }
        if self.eta < 0.0 {
            return Err(ModelError::Spec(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(ModelError::Spec(format!(
                "tau must be in [0,1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl Default for TrainSeeds {
    fn default() -> Self {
        TrainSeeds {
            init: 1,
            shuffle: 2,
            dropout: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch size in documents; the click loss is a per-document sum, so
    /// batches cut across query boundaries.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seeds: TrainSeeds,
    /// Early-stop patience on validation NDCG@5; 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(1e-3),
            seeds: TrainSeeds::default(),
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg5: Option<f64>,
}

// Per-tensor init streams. Fixed ids keep initialization a pure function of
// the init seed and make shared tensors identical across variants.
const STREAM_REL_BLOCK: u64 = 0x100;
const STREAM_REL_HEAD: u64 = 0x180;
const STREAM_OBS_EMBED: u64 = 0x200;
const STREAM_OBS_BLOCK: u64 = 0x210;
const STREAM_OBS_HEAD: u64 = 0x280;
const STREAM_ADV_HEAD: u64 = 0x290;
const STREAM_DROPOUT: u64 = 0x300;

struct HiddenBlock {
    dense: Dense,
    bn: BatchNorm,
    relu: Relu,
}

impl HiddenBlock {
    fn new(input: usize, width: usize, init_seed: u64, stream: u64) -> Self {
        let mut rng = substream(init_seed, stream);
        HiddenBlock {
            dense: Dense::new(input, width, &mut rng),
            bn: BatchNorm::new(width),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix, NnError> {
        let a = self.dense.forward(x)?;
        let b = self.bn.forward(&a, mode)?;
        Ok(self.relu.forward(&b))
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let g = self.relu.backward(upstream)?;
        let g = self.bn.backward(&g)?;
        self.dense.backward(&g)
    }

    fn zero_grad(&mut self) {
        self.dense.zero_grad();
        self.bn.zero_grad();
    }
}

/// Dense/batchnorm/ReLU stack ending in a linear scalar head.
struct Tower {
    blocks: Vec<HiddenBlock>,
    head: Dense,
}

impl Tower {
    fn new(
        input_dim: usize,
        widths: &[usize],
        init_seed: u64,
        block_stream: u64,
        head_stream: u64,
    ) -> Self {
        let hidden = &widths[..widths.len() - 1];
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for (i, &w) in hidden.iter().enumerate() {
            blocks.push(HiddenBlock::new(prev, w, init_seed, block_stream + 2 * i as u64));
            prev = w;
        }
        let mut rng = substream(init_seed, head_stream);
        Tower {
            blocks,
            head: Dense::new(prev, *widths.last().unwrap(), &mut rng),
        }
    }

    /// Forward to the shared hidden representation (input of the head).
    fn forward_hidden(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix, NnError> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix, NnError> {
        let h = self.forward_hidden(x, mode)?;
        self.head.forward(&h)
    }

    /// Backward from head upstream through all blocks; returns input gradient.
    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let mut g = self.head.backward(upstream)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    /// Backward through the hidden blocks only, from a gradient at the shared
    /// hidden representation.
    fn backward_hidden(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let mut g = upstream.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.zero_grad();
        }
        self.head.zero_grad();
    }
}

struct ObsTower {
    embedding: Embedding,
    tower: Tower,
    gradrev: Option<GradRev>,
    adv_head: Option<Dense>,
    dropout: Option<Dropout>,
}

/// A model variant: spec, parameters, and training history. Built untrained
/// by [`build`], filled in by [`train`].
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub input_dim: usize,
    pub y_max: u32,
    pub history: Vec<EpochRecord>,
    relevance: Tower,
    observation: Option<ObsTower>,
    dropout_rng: ChaCha8Rng,
}

/// Construct an untrained model. Two builds with the same seed produce
/// identical parameters.
pub fn build(spec: &ModelSpec, input_dim: usize, init_seed: u64) -> Result<TrainedModel, ModelError> {
    spec.validate()?;
    if input_dim == 0 {
        return Err(ModelError::Spec("input dimension must be >= 1".into()));
    }
    let relevance = Tower::new(
        input_dim,
        &spec.relevance_tower,
        init_seed,
        STREAM_REL_BLOCK,
        STREAM_REL_HEAD,
    );
    let observation = if spec.variant.uses_observation() {
        let mut emb_rng = substream(init_seed, STREAM_OBS_EMBED);
        let embedding = Embedding::new(spec.max_position, spec.position_embedding_dim, &mut emb_rng);
        let tower = Tower::new(
            spec.position_embedding_dim,
            &spec.observation_tower,
            init_seed,
            STREAM_OBS_BLOCK,
            STREAM_OBS_HEAD,
        );
        let (gradrev, adv_head) = if spec.variant.uses_gradrev() {
            let shared_width = spec
                .observation_tower
                .iter()
                .rev()
                .nth(1)
                .copied()
                .unwrap_or(spec.position_embedding_dim);
            let mut rng = substream(init_seed, STREAM_ADV_HEAD);
            (
                Some(GradRev::new(spec.eta)?),
                Some(Dense::new(shared_width, 1, &mut rng)),
            )
        } else {
            (None, None)
        };
        let dropout = if spec.variant.uses_dropout() {
            Some(Dropout::new(spec.tau)?)
        } else {
            None
        };
        Some(ObsTower {
            embedding,
            tower,
            gradrev,
            adv_head,
            dropout,
        })
    } else {
        None
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        input_dim,
        y_max: 4,
        history: Vec::new(),
        relevance,
        observation,
        dropout_rng: substream(init_seed, STREAM_DROPOUT),
    })
}

/// Adversarial targets for the reversal head. `rel_logits` are the current
/// relevance-tower outputs for the batch; the prediction label passes them
/// through a sigmoid and treats the result as a constant, so no gradient can
/// reach the relevance tower through the target.
pub fn adversarial_target(
    choice: AdvLabel,
    labels: &[u32],
    y_max: u32,
    clicks: &[f64],
    rel_logits: &[f64],
) -> Vec<f64> {
    match choice {
        AdvLabel::Utility => labels.iter().map(|&y| y as f64 / y_max as f64).collect(),
        AdvLabel::Click => clicks.to_vec(),
        AdvLabel::Prediction => rel_logits.iter().map(|&f| sigmoid(f)).collect(),
    }
}

struct ForwardOut {
    logits: Vec<f64>,
    rel_logits: Vec<f64>,
    /// Adversarial head outputs (gradrev variants in train mode).
    adv_out: Option<Vec<f64>>,
}

impl TrainedModel {
    fn forward_internal(
        &mut self,
        features: &Matrix,
        positions: Option<&[u32]>,
        mode: Mode,
    ) -> Result<ForwardOut, ModelError> {
        let f = self.relevance.forward(features, mode)?;
        let rel_logits = f.data.clone();
        let obs = match &mut self.observation {
            None => {
                return Ok(ForwardOut {
                    logits: rel_logits.clone(),
                    rel_logits,
                    adv_out: None,
                })
            }
            Some(obs) => obs,
        };
        let positions = positions.ok_or(ModelError::MissingPositions(self.spec.variant))?;
        if positions.len() != features.rows {
            return Err(ModelError::Misaligned(format!(
                "{} positions for a batch of {}",
                positions.len(),
                features.rows
            )));
        }
        let indices: Vec<usize> = positions
            .iter()
            .map(|&p| (p.max(1) as usize).min(self.spec.max_position) - 1)
            .collect();
        let e = obs.embedding.forward(&indices)?;
        let h = obs.tower.forward_hidden(&e, mode)?;
        let g = obs.tower.head.forward(&h)?;

        let adv_out = match (mode, &obs.gradrev, &mut obs.adv_head) {
            (Mode::Train, Some(gr), Some(head)) => {
                let r = gr.forward(&h);
                Some(head.forward(&r)?.data)
            }
            _ => None,
        };

        let g_used = match &mut obs.dropout {
            Some(drop) => drop.forward(&g, mode, &mut self.dropout_rng),
            None => g,
        };

        let logits: Vec<f64> = rel_logits
            .iter()
            .zip(&g_used.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(ForwardOut {
            logits,
            rel_logits,
            adv_out,
        })
    }

    /// Predicted click probabilities for a batch. Two-tower variants require
    /// positions; the biased variant ignores them.
    pub fn forward_click(
        &mut self,
        features: &Matrix,
        positions: Option<&[u32]>,
        mode: Mode,
    ) -> Result<Vec<f64>, ModelError> {
        let out = self.forward_internal(features, positions, mode)?;
        Ok(out.logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Relevance-tower scores in eval mode: running batchnorm statistics, no
    /// dropout, no position input. Scores rank documents by descending order.
    pub fn predict_relevance(&mut self, features: &Matrix) -> Result<Vec<f64>, ModelError> {
        Ok(self.relevance.forward(features, Mode::Eval)?.data)
    }

    /// Per-document relevance scores for one query group.
    pub fn predict_relevance_group(
        &mut self,
        group: &crate::dataset::QueryGroup,
    ) -> Result<Vec<f64>, ModelError> {
        let rows: Vec<&[f64]> = group.documents.iter().map(|d| d.features.as_slice()).collect();
        let x = Matrix::from_rows(&rows)?;
        self.predict_relevance(&x)
    }

    fn param_grad_pairs(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::new();
        for b in &mut self.relevance.blocks {
            pairs.push((&mut b.dense.w.data, &b.dense.gw.data));
            pairs.push((&mut b.dense.b, &b.dense.gb));
            pairs.push((&mut b.bn.gamma, &b.bn.g_gamma));
            pairs.push((&mut b.bn.beta, &b.bn.g_beta));
        }
        pairs.push((&mut self.relevance.head.w.data, &self.relevance.head.gw.data));
        pairs.push((&mut self.relevance.head.b, &self.relevance.head.gb));
        if let Some(obs) = &mut self.observation {
            pairs.push((&mut obs.embedding.table.data, &obs.embedding.gtable.data));
            for b in &mut obs.tower.blocks {
                pairs.push((&mut b.dense.w.data, &b.dense.gw.data));
                pairs.push((&mut b.dense.b, &b.dense.gb));
                pairs.push((&mut b.bn.gamma, &b.bn.g_gamma));
                pairs.push((&mut b.bn.beta, &b.bn.g_beta));
            }
            pairs.push((&mut obs.tower.head.w.data, &obs.tower.head.gw.data));
            pairs.push((&mut obs.tower.head.b, &obs.tower.head.gb));
            if let Some(head) = &mut obs.adv_head {
                pairs.push((&mut head.w.data, &head.gw.data));
                pairs.push((&mut head.b, &head.gb));
            }
        }
        pairs
    }

    fn zero_grad(&mut self) {
        self.relevance.zero_grad();
        if let Some(obs) = &mut self.observation {
            obs.embedding.zero_grad();
            obs.tower.zero_grad();
            if let Some(head) = &mut obs.adv_head {
                head.zero_grad();
            }
        }
    }

    /// All parameters (and batchnorm running statistics) as named tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let tower = |c: &mut Checkpoint, prefix: &str, t: &Tower| {
            for (i, b) in t.blocks.iter().enumerate() {
                let p = format!("{prefix}.block{i}");
                c.push(
                    &format!("{p}.dense.w"),
                    vec![b.dense.w.rows, b.dense.w.cols],
                    b.dense.w.data.clone(),
                );
                c.push(&format!("{p}.dense.b"), vec![b.dense.b.len()], b.dense.b.clone());
                c.push(&format!("{p}.bn.gamma"), vec![b.bn.gamma.len()], b.bn.gamma.clone());
                c.push(&format!("{p}.bn.beta"), vec![b.bn.beta.len()], b.bn.beta.clone());
                c.push(
                    &format!("{p}.bn.running_mean"),
                    vec![b.bn.running_mean.len()],
                    b.bn.running_mean.clone(),
                );
                c.push(
                    &format!("{p}.bn.running_var"),
                    vec![b.bn.running_var.len()],
                    b.bn.running_var.clone(),
                );
            }
            c.push(
                &format!("{prefix}.head.w"),
                vec![t.head.w.rows, t.head.w.cols],
                t.head.w.data.clone(),
            );
            c.push(&format!("{prefix}.head.b"), vec![t.head.b.len()], t.head.b.clone());
        };
        tower(&mut c, "relevance", &self.relevance);
        if let Some(obs) = &self.observation {
            c.push(
                "observation.embedding.table",
                vec![obs.embedding.table.rows, obs.embedding.table.cols],
                obs.embedding.table.data.clone(),
            );
            tower(&mut c, "observation", &obs.tower);
            if let Some(head) = &obs.adv_head {
                c.push(
                    "observation.adv_head.w",
                    vec![head.w.rows, head.w.cols],
                    head.w.data.clone(),
                );
                c.push("observation.adv_head.b", vec![head.b.len()], head.b.clone());
            }
        }
        c
    }

    /// Restore parameters from a checkpoint produced by `to_checkpoint` on a
    /// model with the same spec.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        fn load_vec(dst: &mut [f64], src: &[f64], name: &str) -> Result<(), ModelError> {
            if dst.len() != src.len() {
                return Err(ModelError::Spec(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
            Ok(())
        }
        fn load_tower(t: &mut Tower, prefix: &str, ckpt: &Checkpoint) -> Result<(), ModelError> {
            for (i, b) in t.blocks.iter_mut().enumerate() {
                let p = format!("{prefix}.block{i}");
                load_vec(&mut b.dense.w.data, &ckpt.get(&format!("{p}.dense.w"))?.values, &p)?;
                load_vec(&mut b.dense.b, &ckpt.get(&format!("{p}.dense.b"))?.values, &p)?;
                load_vec(&mut b.bn.gamma, &ckpt.get(&format!("{p}.bn.gamma"))?.values, &p)?;
                load_vec(&mut b.bn.beta, &ckpt.get(&format!("{p}.bn.beta"))?.values, &p)?;
                load_vec(
                    &mut b.bn.running_mean,
                    &ckpt.get(&format!("{p}.bn.running_mean"))?.values,
                    &p,
                )?;
                load_vec(
                    &mut b.bn.running_var,
                    &ckpt.get(&format!("{p}.bn.running_var"))?.values,
                    &p,
                )?;
            }
            load_vec(&mut t.head.w.data, &ckpt.get(&format!("{prefix}.head.w"))?.values, prefix)?;
            load_vec(&mut t.head.b, &ckpt.get(&format!("{prefix}.head.b"))?.values, prefix)?;
            Ok(())
        }
        load_tower(&mut self.relevance, "relevance", ckpt)?;
        if let Some(obs) = &mut self.observation {
            load_vec(
                &mut obs.embedding.table.data,
                &ckpt.get("observation.embedding.table")?.values,
                "observation.embedding.table",
            )?;
            load_tower(&mut obs.tower, "observation", ckpt)?;
            if let Some(head) = &mut obs.adv_head {
                load_vec(
                    &mut head.w.data,
                    &ckpt.get("observation.adv_head.w")?.values,
                    "observation.adv_head.w",
                )?;
                load_vec(
                    &mut head.b,
                    &ckpt.get("observation.adv_head.b")?.values,
                    "observation.adv_head.b",
                )?;
            }
        }
        Ok(())
    }

    /// Flat copy of every trainable parameter, in optimizer walk order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        self.param_grad_pairs()
            .iter()
            .flat_map(|(p, _)| p.iter().copied())
            .collect()
    }

    /// Overwrite every trainable parameter from a flat vector in walk order.
    pub fn set_flat_params(&mut self, theta: &[f64]) {
        let mut offset = 0;
        for (p, _) in self.param_grad_pairs() {
            p.copy_from_slice(&theta[offset..offset + p.len()]);
            offset += p.len();
        }
        assert_eq!(offset, theta.len(), "flat parameter length mismatch");
    }

    /// Flat copy of the accumulated gradients, in optimizer walk order.
    pub fn flat_grads(&mut self) -> Vec<f64> {
        self.param_grad_pairs()
            .iter()
            .flat_map(|(_, g)| g.iter().copied())
            .collect()
    }

    /// Shift every observation-tower weight in place (serving-path purity
    /// checks).
    pub fn perturb_observation(&mut self, delta: f64) {
        if let Some(obs) = &mut self.observation {
            for v in obs.embedding.table.data.iter_mut() {
                *v += delta;
            }
            for b in &mut obs.tower.blocks {
                b.dense.w.data.iter_mut().for_each(|v| *v += delta);
            }
            obs.tower.head.w.data.iter_mut().for_each(|v| *v += delta);
            if let Some(head) = &mut obs.adv_head {
                head.w.data.iter_mut().for_each(|v| *v += delta);
            }
        }
    }
}

/// On-disk model format: the spec plus the parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub input_dim: usize,
    pub y_max: u32,
    pub params: Checkpoint,
}

impl ModelCheckpoint {
    pub fn capture(model: &TrainedModel) -> Self {
        ModelCheckpoint {
            spec: model.spec.clone(),
            input_dim: model.input_dim,
            y_max: model.y_max,
            params: model.to_checkpoint(),
        }
    }

    /// Rebuild a model from the stored spec and parameters.
    pub fn restore(&self) -> Result<TrainedModel, ModelError> {
        let mut model = build(&self.spec, self.input_dim, 0)?;
        model.y_max = self.y_max;
        model.load_checkpoint(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let mc: ModelCheckpoint = serde_json::from_str(text)
            .map_err(|e| ModelError::Spec(format!("bad model checkpoint: {e}")))?;
        Ok(mc)
    }
}

/// One training example: a document with its logged position and click.
#[derive(Debug, Clone, Copy)]
struct DocExample {
    group: usize,
    doc: usize,
    position: u32,
    click: f64,
}

pub struct TrainBatch {
    pub features: Matrix,
    pub positions: Vec<u32>,
    pub clicks: Vec<f64>,
    pub labels: Vec<u32>,
}

fn collect_examples(clicklog: &ClickLog, dataset: &Dataset) -> Result<Vec<DocExample>, ModelError> {
    let by_id: HashMap<&str, usize> = dataset
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.query_id.as_str(), i))
        .collect();
    let mut examples = Vec::new();
    for rec in &clicklog.records {
        let &gi = by_id.get(rec.query_id.as_str()).ok_or_else(|| {
            ModelError::Misaligned(format!("query `{}` not in dataset", rec.query_id))
        })?;
        let group = &dataset.groups[gi];
        if rec.positions.len() != group.documents.len() {
            return Err(ModelError::Misaligned(format!(
                "query `{}`: {} positions vs {} documents",
                rec.query_id,
                rec.positions.len(),
                group.documents.len()
            )));
        }
        for (di, (&p, &c)) in rec.positions.iter().zip(&rec.clicks).enumerate() {
            examples.push(DocExample {
                group: gi,
                doc: di,
                position: p,
                click: c as f64,
            });
        }
    }
    if examples.is_empty() {
        return Err(ModelError::EmptyClickLog);
    }
    Ok(examples)
}

fn gather_batch(examples: &[DocExample], dataset: &Dataset) -> TrainBatch {
    let rows: Vec<&[f64]> = examples
        .iter()
        .map(|e| dataset.groups[e.group].documents[e.doc].features.as_slice())
        .collect();
    TrainBatch {
        features: Matrix::from_rows(&rows).expect("uniform feature dim"),
        positions: examples.iter().map(|e| e.position).collect(),
        clicks: examples.iter().map(|e| e.click).collect(),
        labels: examples
            .iter()
            .map(|e| dataset.groups[e.group].documents[e.doc].label)
            .collect(),
    }
}

/// Per-document sigmoid(f) over the whole training set in eval mode.
fn prediction_targets(
    model: &mut TrainedModel,
    dataset: &Dataset,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut per_group = Vec::with_capacity(dataset.groups.len());
    for g in &dataset.groups {
        let scores = model.predict_relevance_group(g)?;
        per_group.push(scores.into_iter().map(sigmoid).collect());
    }
    Ok(per_group)
}

/// One forward/backward pass on a batch. Returns (click loss, adversarial
/// loss); gradients accumulate into the model's buffers. `adv_targets`
/// overrides the batch-derived adversarial targets when given (the
/// prediction label's epoch snapshot).
fn train_step_with(
    model: &mut TrainedModel,
    batch: &TrainBatch,
    adv_targets: Option<&[f64]>,
) -> Result<(f64, f64), ModelError> {
    model.zero_grad();
    let positions = model
        .spec
        .variant
        .uses_observation()
        .then_some(batch.positions.as_slice());
    let out = model.forward_internal(&batch.features, positions, Mode::Train)?;
    let b = batch.clicks.len() as f64;

    let mut loss_click = 0.0;
    let mut dlogit = Matrix::zeros(batch.clicks.len(), 1);
    for (i, (&z, &c)) in out.logits.iter().zip(&batch.clicks).enumerate() {
        let (l, g) = sigmoid_ce(z, c);
        loss_click += l;
        dlogit.data[i] = g / b;
    }
    loss_click /= b;

    let mut loss_rev = 0.0;
    let adv_grad = if let Some(adv_out) = &out.adv_out {
        let targets = match adv_targets {
            Some(t) => t.to_vec(),
            None => adversarial_target(
                model.spec.adv_label,
                &batch.labels,
                model.y_max,
                &batch.clicks,
                &out.rel_logits,
            ),
        };
        let mut grad = Matrix::zeros(adv_out.len(), 1);
        for (i, (&pred, &t)) in adv_out.iter().zip(&targets).enumerate() {
            let (l, g) = crate::nnkernel::squared_loss(pred, t);
            loss_rev += l;
            grad.data[i] = g / b;
        }
        loss_rev /= b;
        Some(grad)
    } else {
        None
    };

    // Relevance tower takes the click-loss gradient.
    model.relevance.backward(&dlogit)?;

    if let Some(obs) = &mut model.observation {
        // Main path: through dropout (if any) into the observation head.
        let dg = match &mut obs.dropout {
            Some(drop) => drop.backward(&dlogit),
            None => dlogit.clone(),
        };
        let mut dh = obs.tower.head.backward(&dg)?;
        // Adversarial path: reversed and added at the shared hidden layer.
        if let (Some(grad), Some(head), Some(gr)) =
            (adv_grad, obs.adv_head.as_mut(), obs.gradrev.as_ref())
        {
            let dr = head.backward(&grad)?;
            let drev = gr.backward(&dr);
            dh.add_assign(&drev)?;
        }
        let de = obs.tower.backward_hidden(&dh)?;
        obs.embedding.backward(&de)?;
    }

    Ok((loss_click, loss_rev))
}

fn train_step(model: &mut TrainedModel, batch: &TrainBatch) -> Result<(f64, f64), ModelError> {
    train_step_with(model, batch, None)
}

/// Which update rule a flat-parameter span belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamGroup {
    Relevance,
    ObsShared,
    ObsHead,
    AdvHead,
}

impl TrainedModel {
    /// Group tag per flat parameter, aligned with the optimizer walk order.
    fn flat_param_groups(&mut self) -> Vec<ParamGroup> {
        let has_obs = self.observation.is_some();
        let has_adv = self
            .observation
            .as_ref()
            .map_or(false, |o| o.adv_head.is_some());
        let rel_blocks = self.relevance.blocks.len();
        let obs_blocks = self
            .observation
            .as_ref()
            .map_or(0, |o| o.tower.blocks.len());
        let mut tags = Vec::new();
        let pairs = self.param_grad_pairs();
        let mut i = 0;
        let push = |tags: &mut Vec<ParamGroup>, len: usize, g: ParamGroup| {
            tags.extend(std::iter::repeat(g).take(len));
        };
        // relevance blocks: 4 tensors each, then head w+b
        for _ in 0..rel_blocks {
            for _ in 0..4 {
                push(&mut tags, pairs[i].0.len(), ParamGroup::Relevance);
                i += 1;
            }
        }
        for _ in 0..2 {
            push(&mut tags, pairs[i].0.len(), ParamGroup::Relevance);
            i += 1;
        }
        if has_obs {
            push(&mut tags, pairs[i].0.len(), ParamGroup::ObsShared); // embedding
            i += 1;
            for _ in 0..obs_blocks {
                for _ in 0..4 {
                    push(&mut tags, pairs[i].0.len(), ParamGroup::ObsShared);
                    i += 1;
                }
            }
            for _ in 0..2 {
                push(&mut tags, pairs[i].0.len(), ParamGroup::ObsHead);
                i += 1;
            }
            if has_adv {
                for _ in 0..2 {
                    push(&mut tags, pairs[i].0.len(), ParamGroup::AdvHead);
                    i += 1;
                }
            }
        }
        debug_assert_eq!(i, pairs.len());
        tags
    }
}

/// Finite-difference check of the per-variant training gradients on random
/// batches. For gradrev models the numeric oracle is composite:
/// FD(L_click) on every parameter, plus FD(L_rev) scaled by +1 on the
/// adversarial head and by -eta on the shared observation layers, which is
/// exactly what the reversal is defined to compute.
pub fn gradcheck_variants(trials: u64, seed: u64) -> Vec<crate::nnkernel::gradcheck_suite::CaseResult> {
    use crate::nnkernel::gradcheck_suite::CaseResult;
    use crate::nnkernel::{finite_diff, max_rel_error, FD_STEP};
    use rand::Rng;

    let mut results = Vec::new();
    for (vi, variant) in [Variant::Biased, Variant::Pal, Variant::GradRev]
        .into_iter()
        .enumerate()
    {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let mut rng = crate::rng::substream(seed + vi as u64, t);
            let dim = rng.gen_range(2..=6);
            let batch = rng.gen_range(4..=16);
            let eta = [0.0, 0.5, 1.0][t as usize % 3];
            let spec = ModelSpec {
                variant,
                relevance_tower: vec![rng.gen_range(2..=8), 1],
                observation_tower: vec![rng.gen_range(2..=6), 1],
                position_embedding_dim: rng.gen_range(1..=4),
                max_position: 10,
                eta,
                tau: 0.0,
                adv_label: AdvLabel::Click,
            };
            let mut model = build(&spec, dim, seed ^ t).unwrap();
            let features = Matrix {
                rows: batch,
                cols: dim,
                data: (0..batch * dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            };
            let batch_data = TrainBatch {
                features,
                positions: (0..batch).map(|_| rng.gen_range(1..=12)).collect(),
                clicks: (0..batch).map(|_| f64::from(rng.gen::<bool>())).collect(),
                labels: (0..batch).map(|_| rng.gen_range(0..=4)).collect(),
            };

            train_step(&mut model, &batch_data).unwrap();
            let analytic = model.flat_grads();
            let groups = model.flat_param_groups();
            let mut theta = model.flat_params();
            let bsz = batch_data.clicks.len() as f64;

            let mut click_loss = |t: &[f64]| -> f64 {
                model.set_flat_params(t);
                let positions = model
                    .spec
                    .variant
                    .uses_observation()
                    .then_some(batch_data.positions.as_slice());
                let out = model
                    .forward_internal(&batch_data.features, positions, Mode::Train)
                    .unwrap();
                out.logits
                    .iter()
                    .zip(&batch_data.clicks)
                    .map(|(&z, &c)| sigmoid_ce(z, c).0)
                    .sum::<f64>()
                    / bsz
            };
            let mut numeric = finite_diff(&mut click_loss, &mut theta, FD_STEP);
            model.set_flat_params(&theta);

            if variant.uses_gradrev() {
                let mut rev_loss = |t: &[f64]| -> f64 {
                    model.set_flat_params(t);
                    let out = model
                        .forward_internal(
                            &batch_data.features,
                            Some(&batch_data.positions),
                            Mode::Train,
                        )
                        .unwrap();
                    let targets = adversarial_target(
                        model.spec.adv_label,
                        &batch_data.labels,
                        model.y_max,
                        &batch_data.clicks,
                        &out.rel_logits,
                    );
                    out.adv_out
                        .as_ref()
                        .unwrap()
                        .iter()
                        .zip(&targets)
                        .map(|(&p, &tv)| (tv - p) * (tv - p))
                        .sum::<f64>()
                        / bsz
                };
                let rev_numeric = finite_diff(&mut rev_loss, &mut theta, FD_STEP);
                model.set_flat_params(&theta);
                for (i, g) in groups.iter().enumerate() {
                    match g {
                        ParamGroup::AdvHead => numeric[i] += rev_numeric[i],
                        ParamGroup::ObsShared => numeric[i] += -eta * rev_numeric[i],
                        // click-label L_rev has no dependence on these
                        ParamGroup::Relevance | ParamGroup::ObsHead => {}
                    }
                }
            }

            worst = worst.max(max_rel_error(&analytic, &numeric));
        }
        let name = format!("model variant {variant:?}");
        results.push(CaseResult::new(&name, trials, worst, 1e-4));
    }
    results
}

fn val_ndcg5(model: &mut TrainedModel, valid: &Dataset) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    for g in &valid.groups {
        let scores = model.predict_relevance_group(g)?;
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let ranked: Vec<f64> = order.iter().map(|&i| g.documents[i].label as f64).collect();
        sum += crate::eval::ndcg_at_k(&ranked, 5).map_err(|e| ModelError::Spec(e.to_string()))?;
    }
    Ok(sum / valid.groups.len().max(1) as f64)
}

/// Minibatch training on a click log. Returns the model at the epoch with the
/// best validation NDCG@5 when a validation set is given, otherwise the final
/// epoch. Deterministic given the seeds in `cfg`.
pub fn train(
    spec: &ModelSpec,
    clicklog: &ClickLog,
    train_data: &Dataset,
    valid_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, ModelError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Spec("epochs and batch_size must be >= 1".into()));
    }
    let mut model = build(spec, train_data.dim, cfg.seeds.init)?;
    model.y_max = train_data.y_max;
    model.dropout_rng = substream(cfg.seeds.dropout, 0);
    let mut examples = collect_examples(clicklog, train_data)?;
    let mut optimizer = Optimizer::new(cfg.optimizer)?;

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0usize;

    // The prediction adversarial label supervises the reversal head with a
    // pre-trained relevance tower's detached outputs; a tower trained inside
    // the same run would start uninformative and the adversarial task would
    // never gain traction. The teacher is a biased-variant model trained on
    // the same click log with its own derived seeds.
    let teacher_targets = if spec.variant.uses_gradrev() && spec.adv_label == AdvLabel::Prediction
    {
        const PRETRAIN_SALT: u64 = 0x9ed;
        let teacher_spec = ModelSpec {
            variant: Variant::Biased,
            relevance_tower: spec.relevance_tower.clone(),
            ..spec.clone()
        };
        let teacher_cfg = TrainConfig {
            seeds: TrainSeeds {
                init: crate::rng::mix(cfg.seeds.init, PRETRAIN_SALT),
                shuffle: crate::rng::mix(cfg.seeds.shuffle, PRETRAIN_SALT),
                dropout: crate::rng::mix(cfg.seeds.dropout, PRETRAIN_SALT),
            },
            ..cfg.clone()
        };
        let mut teacher = train(&teacher_spec, clicklog, train_data, valid_data, &teacher_cfg)?;
        Some(prediction_targets(&mut teacher, train_data)?)
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut shuffle_rng = substream(cfg.seeds.shuffle, epoch as u64);
        examples.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // batchnorm needs at least 2 rows
            }
            let batch = gather_batch(chunk, train_data);
            let targets: Option<Vec<f64>> = teacher_targets.as_ref().map(|snap| {
                chunk.iter().map(|e| snap[e.group][e.doc]).collect()
            });
            let (lc, lr) = train_step_with(&mut model, &batch, targets.as_deref())?;
            let loss = lc + lr;
            if !loss.is_finite() {
                return Err(ModelError::NanLoss { epoch, step });
            }
            loss_sum += loss;
            batches += 1;
            let mut pairs = model.param_grad_pairs();
            optimizer.step(pairs.drain(..))?;
        }
        let train_loss = loss_sum / batches.max(1) as f64;

        let val = match valid_data {
            Some(v) if !v.groups.is_empty() => Some(val_ndcg5(&mut model, v)?),
            _ => None,
        };
        model.history.push(EpochRecord {
            epoch,
            train_loss,
            val_ndcg5: val,
        });

        if let Some(v) = val {
            let improved = best.as_ref().map_or(true, |(b, _)| v > *b);
            if improved {
                best = Some((v, model.to_checkpoint()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, ckpt)) = best {
        model.load_checkpoint(&ckpt)?;
    }
    Ok(model)
}
