//! Full model assembly: learnable mask, relational encoders, edge scorer,
//! classifier head, and the batched forward passes used by training and
//! evaluation.
//!
//! The module owns three contracts that the rest of the crate relies on:
//!
//! * **Parameter order.** [`ModelParams::visit`] enumerates learnable tensors
//!   in a fixed canonical order. Optimizer slots, gradient collection, and
//!   checkpoint layout all index into that order, so it must never change
//!   silently.
//! * **Initialization order.** [`ModelParams::init`] draws tensors from a
//!   single seeded stream in the same canonical order. Disabling a component
//!   removes its draws entirely (the options become `None`), so a reduced
//!   model draws exactly the tensors it owns and nothing else.
//! * **Noise draw order.** [`draw_batch_noise`] materializes every stochastic
//!   tensor for one training step up front, from per-purpose streams:
//!   mask dropout, then encoder dropout (scoring pass first, then one set per
//!   sampling round), then edge noise (round-major, subject-minor). Forward
//!   passes consume these tensors and perform no draws of their own, which
//!   keeps replays bitwise and lets gradient checks freeze the noise.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::braindata::BrainNetwork;
use crate::encoders::{self, BnUse, GinLayerIds, BN_EPS};
use crate::extractor;
use crate::fmath;
use crate::rng::{self, tags, DetRng};
use crate::selector;
use crate::tape::{column_mean_var, DiffError, Tape, ValueId};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

/// Component switches. Defaults enable everything; ablations turn individual
/// pieces off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFlags {
    /// Learn a feature mask and feed masked features downstream.
    pub use_mask: bool,
    /// Score edges and predict on sampled subgraphs.
    pub use_sampler: bool,
    /// Add the mask-entropy term to the objective.
    pub use_entropy: bool,
    /// Add the reconstruction term (and its high-pass decoder).
    pub use_recon: bool,
    /// Add the sample-alignment term.
    pub use_align: bool,
    /// Reuse the prediction encoder for edge scoring; when false a second
    /// encoder with its own weights handles the scoring pass.
    pub share_encoder: bool,
    /// Feed raw (unmasked) features to the prediction encoder even when the
    /// mask is otherwise active.
    pub raw_x: bool,
    /// Feed the binary adjacency to the prediction encoder even when the
    /// sampler is otherwise active.
    pub raw_a: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            use_mask: true,
            use_sampler: true,
            use_entropy: true,
            use_recon: true,
            use_align: true,
            share_encoder: true,
            raw_x: false,
            raw_a: false,
        }
    }
}

impl ModelFlags {
    /// All components off: a plain GIN classifier on raw inputs.
    pub fn baseline() -> Self {
        ModelFlags {
            use_mask: false,
            use_sampler: false,
            use_entropy: false,
            use_recon: false,
            use_align: false,
            share_encoder: true,
            raw_x: false,
            raw_a: false,
        }
    }

    /// The scoring encoder pass runs when anything consumes its output.
    pub fn needs_scoring_pass(&self) -> bool {
        self.use_sampler || self.use_recon
    }

    /// Number of sampling rounds per step; a single deterministic round when
    /// the sampler is off.
    pub fn rounds(&self, k: usize) -> usize {
        if self.use_sampler {
            k.max(1)
        } else {
            1
        }
    }

    /// Whether predictions run on sampled soft adjacencies.
    pub fn predicts_on_samples(&self) -> bool {
        self.use_sampler && !self.raw_a
    }

    /// Whether the entropy term is part of the objective (it needs a mask).
    pub fn entropy_active(&self) -> bool {
        self.use_mask && self.use_entropy
    }

    /// Whether the alignment term is part of the objective (it needs samples).
    pub fn align_active(&self) -> bool {
        self.use_sampler && self.use_align
    }
}

/// Learnables of one GIN layer plus its batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinLayerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Scalar self-loop weight (stored 1x1), initialized to zero.
    pub eps: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// Running mean/variance used at evaluation time; updated by the trainer,
    /// not by gradients.
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
}

impl GinLayerParams {
    fn new(in_dim: usize, out_dim: usize, rng: &mut DetRng) -> Self {
        GinLayerParams {
            w1: glorot(in_dim, out_dim, rng),
            b1: bias_uniform(in_dim, out_dim, rng),
            w2: glorot(out_dim, out_dim, rng),
            b2: bias_uniform(out_dim, out_dim, rng),
            eps: Tensor::zeros(1, 1),
            bn_gamma: Tensor::full(1, out_dim, 1.0),
            bn_beta: Tensor::zeros(1, out_dim),
            bn_running_mean: Tensor::zeros(1, out_dim),
            bn_running_var: Tensor::full(1, out_dim, 1.0),
        }
    }
}

/// Edge-scorer MLP weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Complete parameter set. Optional components are `None` when the
/// corresponding flag disables them, so the parameter inventory always
/// matches the architecture exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub hidden: usize,
    pub classes: usize,
    pub flags: ModelFlags,
    /// Mask factor (n x hidden); the mask itself is sigmoid of its Gram matrix.
    pub w_mask: Option<Tensor>,
    /// Prediction encoder layers.
    pub gin: Vec<GinLayerParams>,
    /// Separate scoring encoder when `share_encoder` is off.
    pub scorer_gin: Option<Vec<GinLayerParams>>,
    /// High-pass decoder weight (hidden x hidden).
    pub hpgnn_w: Option<Tensor>,
    /// Edge-scorer MLP (2*hidden -> hidden -> 1).
    pub scorer: Option<ScorerParams>,
    /// Classifier head on sum-pooled node embeddings.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Glorot-uniform weight matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
/// filled row-major from the stream.
fn glorot(rows: usize, cols: usize, rng: &mut DetRng) -> Tensor {
    let limit = fmath::sqrt(6.0 / (rows + cols) as f64);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.range(-limit, limit);
    }
    t
}

/// Bias row: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the standard linear-layer
/// default. Nonzero biases also keep initial pre-activations off the ReLU
/// kink for all-zero input rows (isolated nodes with dropped features),
/// where exact zeros would otherwise sit on the non-differentiable point.
fn bias_uniform(fan_in: usize, cols: usize, rng: &mut DetRng) -> Tensor {
    let limit = 1.0 / fmath::sqrt(fan_in as f64);
    let mut t = Tensor::zeros(1, cols);
    for v in t.data_mut() {
        *v = rng.range(-limit, limit);
    }
    t
}

pub const GIN_LAYERS: usize = 2;

impl ModelParams {
    /// Deterministic initialization from the run seed. Tensors are drawn in
    /// canonical order (mask factor, prediction encoder, scoring encoder,
    /// decoder, edge scorer, head; weight before its bias): weights
    /// Glorot-uniform, biases uniform in ±1/sqrt(fan_in), self-loop weights
    /// zero, batch-norm scale one and shift zero.
    pub fn init(n: usize, classes: usize, cfg: &TrainConfig) -> Self {
        let d = cfg.hidden_dim;
        let flags = cfg.flags;
        let mut rng = DetRng::new(rng::derive_seed(cfg.seed, &[tags::PARAM_INIT]));

        let w_mask = flags.use_mask.then(|| glorot(n, d, &mut rng));
        let mut gin = Vec::with_capacity(GIN_LAYERS);
        for layer in 0..GIN_LAYERS {
            let in_dim = if layer == 0 { n } else { d };
            gin.push(GinLayerParams::new(in_dim, d, &mut rng));
        }
        let scorer_gin = (flags.needs_scoring_pass() && !flags.share_encoder).then(|| {
            (0..GIN_LAYERS)
                .map(|layer| {
                    let in_dim = if layer == 0 { n } else { d };
                    GinLayerParams::new(in_dim, d, &mut rng)
                })
                .collect::<Vec<_>>()
        });
        let hpgnn_w = flags.use_recon.then(|| glorot(d, d, &mut rng));
        let scorer = flags.use_sampler.then(|| ScorerParams {
            w1: glorot(2 * d, d, &mut rng),
            b1: bias_uniform(2 * d, d, &mut rng),
            w2: glorot(d, 1, &mut rng),
            b2: bias_uniform(d, 1, &mut rng),
        });
        let head_w = glorot(d, classes, &mut rng);
        let head_b = bias_uniform(d, classes, &mut rng);

        ModelParams {
            n,
            hidden: d,
            classes,
            flags,
            w_mask,
            gin,
            scorer_gin,
            hpgnn_w,
            scorer,
            head_w,
            head_b,
        }
    }

    /// Learnable tensors with stable names, in canonical order. This order
    /// defines optimizer slot assignment and checkpoint layout.
    pub fn visit(&self) -> Vec<(alloc::string::String, &Tensor)> {
        use alloc::format;
        use alloc::string::String;
        let mut out = Vec::new();
        if let Some(w) = &self.w_mask {
            out.push((String::from("w_mask"), w));
        }
        for (i, l) in self.gin.iter().enumerate() {
            out.push((format!("gin.{i}.w1"), &l.w1));
            out.push((format!("gin.{i}.b1"), &l.b1));
            out.push((format!("gin.{i}.w2"), &l.w2));
            out.push((format!("gin.{i}.b2"), &l.b2));
            out.push((format!("gin.{i}.eps"), &l.eps));
            out.push((format!("gin.{i}.bn_gamma"), &l.bn_gamma));
            out.push((format!("gin.{i}.bn_beta"), &l.bn_beta));
        }
        if let Some(layers) = &self.scorer_gin {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("scorer_gin.{i}.w1"), &l.w1));
                out.push((format!("scorer_gin.{i}.b1"), &l.b1));
                out.push((format!("scorer_gin.{i}.w2"), &l.w2));
                out.push((format!("scorer_gin.{i}.b2"), &l.b2));
                out.push((format!("scorer_gin.{i}.eps"), &l.eps));
                out.push((format!("scorer_gin.{i}.bn_gamma"), &l.bn_gamma));
                out.push((format!("scorer_gin.{i}.bn_beta"), &l.bn_beta));
            }
        }
        if let Some(w) = &self.hpgnn_w {
            out.push((String::from("hpgnn.w"), w));
        }
        if let Some(s) = &self.scorer {
            out.push((String::from("scorer.w1"), &s.w1));
            out.push((String::from("scorer.b1"), &s.b1));
            out.push((String::from("scorer.w2"), &s.w2));
            out.push((String::from("scorer.b2"), &s.b2));
        }
        out.push((String::from("head.w"), &self.head_w));
        out.push((String::from("head.b"), &self.head_b));
        out
    }

    /// Mutable view of the learnables, in the same order as [`visit`].
    ///
    /// [`visit`]: ModelParams::visit
    pub fn visit_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w_mask {
            out.push(w);
        }
        for l in &mut self.gin {
            out.push(&mut l.w1);
            out.push(&mut l.b1);
            out.push(&mut l.w2);
            out.push(&mut l.b2);
            out.push(&mut l.eps);
            out.push(&mut l.bn_gamma);
            out.push(&mut l.bn_beta);
        }
        if let Some(layers) = &mut self.scorer_gin {
            for l in layers {
                out.push(&mut l.w1);
                out.push(&mut l.b1);
                out.push(&mut l.w2);
                out.push(&mut l.b2);
                out.push(&mut l.eps);
                out.push(&mut l.bn_gamma);
                out.push(&mut l.bn_beta);
            }
        }
        if let Some(w) = &mut self.hpgnn_w {
            out.push(w);
        }
        if let Some(s) = &mut self.scorer {
            out.push(&mut s.w1);
            out.push(&mut s.b1);
            out.push(&mut s.w2);
            out.push(&mut s.b2);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Persistent non-learnable state (batch-norm running statistics), with
    /// stable names for checkpointing.
    pub fn stats(&self) -> Vec<(alloc::string::String, &Tensor)> {
        use alloc::format;
        let mut out = Vec::new();
        for (i, l) in self.gin.iter().enumerate() {
            out.push((format!("gin.{i}.bn_running_mean"), &l.bn_running_mean));
            out.push((format!("gin.{i}.bn_running_var"), &l.bn_running_var));
        }
        if let Some(layers) = &self.scorer_gin {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("scorer_gin.{i}.bn_running_mean"), &l.bn_running_mean));
                out.push((format!("scorer_gin.{i}.bn_running_var"), &l.bn_running_var));
            }
        }
        out
    }

    /// Mutable running statistics, in the same order as [`stats`].
    ///
    /// [`stats`]: ModelParams::stats
    pub fn stats_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.gin {
            out.push(&mut l.bn_running_mean);
            out.push(&mut l.bn_running_var);
        }
        if let Some(layers) = &mut self.scorer_gin {
            for l in layers {
                out.push(&mut l.bn_running_mean);
                out.push(&mut l.bn_running_var);
            }
        }
        out
    }

    /// Copy every learnable onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let w_mask = self.w_mask.as_ref().map(|w| tape.param(w.clone()));
        let gin = bind_gin(tape, &self.gin);
        let scorer_gin = self.scorer_gin.as_ref().map(|ls| bind_gin(tape, ls));
        let hpgnn_w = self.hpgnn_w.as_ref().map(|w| tape.param(w.clone()));
        let scorer = self.scorer.as_ref().map(|s| BoundScorer {
            w1: tape.param(s.w1.clone()),
            b1: tape.param(s.b1.clone()),
            w2: tape.param(s.w2.clone()),
            b2: tape.param(s.b2.clone()),
        });
        let head_w = tape.param(self.head_w.clone());
        let head_b = tape.param(self.head_b.clone());

        let mut order = Vec::new();
        if let Some(id) = w_mask {
            order.push(id);
        }
        for l in &gin {
            order.extend([l.w1, l.b1, l.w2, l.b2, l.eps, l.bn_gamma, l.bn_beta]);
        }
        if let Some(ls) = &scorer_gin {
            for l in ls {
                order.extend([l.w1, l.b1, l.w2, l.b2, l.eps, l.bn_gamma, l.bn_beta]);
            }
        }
        if let Some(id) = hpgnn_w {
            order.push(id);
        }
        if let Some(s) = &scorer {
            order.extend([s.w1, s.b1, s.w2, s.b2]);
        }
        order.push(head_w);
        order.push(head_b);

        BoundModel {
            w_mask,
            gin,
            scorer_gin,
            hpgnn_w,
            scorer,
            head_w,
            head_b,
            order,
        }
    }
}

fn bind_gin(tape: &mut Tape, layers: &[GinLayerParams]) -> Vec<GinLayerIds> {
    layers
        .iter()
        .map(|l| GinLayerIds {
            w1: tape.param(l.w1.clone()),
            b1: tape.param(l.b1.clone()),
            w2: tape.param(l.w2.clone()),
            b2: tape.param(l.b2.clone()),
            eps: tape.param(l.eps.clone()),
            bn_gamma: tape.param(l.bn_gamma.clone()),
            bn_beta: tape.param(l.bn_beta.clone()),
        })
        .collect()
}

/// Tape handles for one bound copy of the parameters.
pub struct BoundModel {
    pub w_mask: Option<ValueId>,
    pub gin: Vec<GinLayerIds>,
    pub scorer_gin: Option<Vec<GinLayerIds>>,
    pub hpgnn_w: Option<ValueId>,
    pub scorer: Option<BoundScorer>,
    pub head_w: ValueId,
    pub head_b: ValueId,
    /// Leaf ids aligned with [`ModelParams::visit`] order, for gradient
    /// collection.
    pub order: Vec<ValueId>,
}

pub struct BoundScorer {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

/// Which encoder a batch-norm update belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnOwner {
    Prediction,
    Scoring,
}

/// All stochastic tensors for one training step, drawn before the forward
/// pass. See the module docs for the draw-order contract.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    /// Pair-symmetric 0/1 mask-dropout realization with its keep probability;
    /// one realization shared by the whole batch.
    pub mask_dropout: Option<(Tensor, f64)>,
    /// Per-layer dropout for the scoring encoder pass, drawn over the stacked
    /// (batch*n) x hidden activations.
    pub scoring_dropout: Vec<Option<(Tensor, f64)>>,
    /// Per-round noise for the prediction passes.
    pub rounds: Vec<RoundNoise>,
}

#[derive(Clone, Debug)]
pub struct RoundNoise {
    /// Per-subject logistic edge noise (one column per edge list).
    pub edge_noise: Vec<Tensor>,
    /// Per-layer dropout for this round's prediction encoder pass.
    pub gin_dropout: Vec<Option<(Tensor, f64)>>,
}

/// Draw every stochastic tensor for one training step. Streams are derived
/// per purpose from `(seed, tag, epoch, batch_index)`, so toggling one noise
/// source never shifts another.
pub fn draw_batch_noise(
    cfg: &TrainConfig,
    n: usize,
    edge_counts: &[usize],
    epoch: u64,
    batch_index: u64,
) -> BatchNoise {
    let flags = cfg.flags;
    let batch = edge_counts.len();
    let rounds = flags.rounds(cfg.k);

    let mask_dropout = if flags.use_mask && cfg.feature_dropout > 0.0 {
        let mut stream = DetRng::new(rng::derive_seed(
            cfg.seed,
            &[tags::MASK_DROPOUT, epoch, batch_index],
        ));
        let keep = 1.0 - cfg.feature_dropout;
        Some((
            selector::draw_pair_dropout(n, cfg.feature_dropout, &mut stream),
            keep,
        ))
    } else {
        None
    };

    let mut gin_stream = DetRng::new(rng::derive_seed(
        cfg.seed,
        &[tags::GIN_DROPOUT, epoch, batch_index],
    ));
    let mut draw_layer_masks = |active: bool| -> Vec<Option<(Tensor, f64)>> {
        (0..GIN_LAYERS)
            .map(|_| {
                if active && cfg.gin_dropout > 0.0 {
                    Some((
                        draw_dropout_mask(batch * n, cfg.hidden_dim, cfg.gin_dropout, &mut gin_stream),
                        1.0 - cfg.gin_dropout,
                    ))
                } else {
                    None
                }
            })
            .collect()
    };
    let scoring_dropout = draw_layer_masks(flags.needs_scoring_pass());
    let mut round_gin: Vec<Vec<Option<(Tensor, f64)>>> = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        round_gin.push(draw_layer_masks(true));
    }

    let mut edge_stream = DetRng::new(rng::derive_seed(
        cfg.seed,
        &[tags::EDGE_NOISE, epoch, batch_index],
    ));
    let round_noise: Vec<Vec<Tensor>> = (0..rounds)
        .map(|_| {
            edge_counts
                .iter()
                .map(|&m| {
                    if flags.use_sampler {
                        extractor::draw_edge_noise(m, &mut edge_stream)
                    } else {
                        Tensor::zeros(m.max(1), 1)
                    }
                })
                .collect()
        })
        .collect();

    BatchNoise {
        mask_dropout,
        scoring_dropout,
        rounds: round_noise
            .into_iter()
            .zip(round_gin)
            .map(|(edge_noise, gin_dropout)| RoundNoise {
                edge_noise,
                gin_dropout,
            })
            .collect(),
    }
}

/// Independent 0/1 dropout mask over an r x c activation block.
fn draw_dropout_mask(r: usize, c: usize, rate: f64, rng: &mut DetRng) -> Tensor {
    let mut t = Tensor::zeros(r, c);
    for v in t.data_mut() {
        *v = if rng.uniform() < rate { 0.0 } else { 1.0 };
    }
    t
}

/// Everything the trainer needs from one training forward pass.
pub struct ForwardArtifacts {
    /// Round-averaged logits (batch x classes).
    pub avg_logits: ValueId,
    pub loss_cls: ValueId,
    pub loss_entropy: Option<ValueId>,
    pub loss_recon: Option<ValueId>,
    pub loss_align: Option<ValueId>,
    /// Weighted sum of the active terms.
    pub total: ValueId,
    /// Pre-normalization activations for running-stat updates, in execution
    /// order (scoring pass first, then rounds).
    pub bn_updates: Vec<(BnOwner, usize, ValueId)>,
    /// Soft sampled adjacencies, round-major then subject order; empty when
    /// the sampler is off.
    pub gammas: Vec<ValueId>,
    /// Pre-dropout mask probabilities, when the mask is on.
    pub m_base: Option<ValueId>,
    /// Reconstructed inputs per subject, when reconstruction is on.
    pub x_hats: Vec<ValueId>,
}

/// Build the full training-mode computation for one batch on `tape`.
///
/// `noise` must come from [`draw_batch_noise`] with matching config and edge
/// counts. Batch normalization uses batch statistics; the returned
/// `bn_updates` let the caller fold them into the running estimates.
pub fn forward_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &TrainConfig,
    subjects: &[&BrainNetwork],
    labels: &[usize],
    noise: &BatchNoise,
) -> Result<ForwardArtifacts, DiffError> {
    let flags = cfg.flags;
    let batch = subjects.len();
    assert_eq!(labels.len(), batch, "one label per subject");
    assert!(batch > 0, "empty batch");
    let n = subjects[0].x.rows();
    let rounds = flags.rounds(cfg.k);
    assert_eq!(noise.rounds.len(), rounds, "noise drawn for a different k");

    // Constants: raw features and binary adjacency per subject.
    let x_ids: Vec<ValueId> = subjects.iter().map(|s| tape.constant(s.x.clone())).collect();
    let a_ids: Vec<ValueId> = subjects.iter().map(|s| tape.constant(s.a.clone())).collect();

    // Mask pass: one global mask, one dropout realization for the batch.
    let dropout_ref = noise.mask_dropout.as_ref().map(|(t, keep)| (t, *keep));
    let mask = match bound.w_mask {
        Some(w) => Some(selector::build_mask(tape, w, dropout_ref)?),
        None => None,
    };
    let masked: Option<Vec<ValueId>> = match &mask {
        Some(m) => {
            let mut out = Vec::with_capacity(batch);
            for &x in &x_ids {
                out.push(tape.mul(x, m.m)?);
            }
            Some(out)
        }
        None => None,
    };

    let scoring_features: &[ValueId] = masked.as_deref().unwrap_or(&x_ids);
    let prediction_features: &[ValueId] = if flags.raw_x {
        &x_ids
    } else {
        masked.as_deref().unwrap_or(&x_ids)
    };

    let mut bn_updates = Vec::new();

    // Scoring pass: one encoder run on the binary adjacency feeds both the
    // edge scorer and the reconstruction decoder.
    let scoring = if flags.needs_scoring_pass() {
        let layers = bound
            .scorer_gin
            .as_deref()
            .unwrap_or(&bound.gin);
        let owner = if bound.scorer_gin.is_some() {
            BnOwner::Scoring
        } else {
            BnOwner::Prediction
        };
        let dropout: Vec<Option<(&Tensor, f64)>> = noise
            .scoring_dropout
            .iter()
            .map(|d| d.as_ref().map(|(t, keep)| (t, *keep)))
            .collect();
        let bn: Vec<BnUse> = (0..layers.len()).map(|_| BnUse::Train).collect();
        let encoded = encoders::gin_encode(tape, scoring_features, &a_ids, layers, &bn, &dropout)?;
        for (layer, &id) in encoded.bn_inputs.iter().enumerate() {
            bn_updates.push((owner, layer, id));
        }
        Some(encoded)
    } else {
        None
    };

    // Reconstruction: high-pass decode each subject and compare against its
    // masked input under the same mask realization.
    let mut x_hats = Vec::new();
    let loss_recon = if flags.use_recon {
        let encoded = scoring.as_ref().expect("recon implies scoring pass");
        let w = bound.hpgnn_w.expect("recon implies decoder weights");
        let mask_id = match &mask {
            Some(m) => m.m,
            None => tape.constant(Tensor::full(n, n, 1.0)),
        };
        let mut acc: Option<ValueId> = None;
        for (s, subject) in subjects.iter().enumerate() {
            let mean_adj = tape.constant(encoders::row_normalized(&subject.a));
            let h_hat = encoders::hpgnn_encode(tape, encoded.per_subject[s], mean_adj, w)?;
            let x_hat = encoders::reconstruct(tape, h_hat, mask_id)?;
            x_hats.push(x_hat);
            let target = scoring_features[s];
            let loss_s = encoders::recon_loss(tape, x_hat, target)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss_s)?,
                None => loss_s,
            });
        }
        Some(tape.scale(acc.expect("non-empty batch"), 1.0 / batch as f64))
    } else {
        None
    };

    // Edge scores are sample-independent; rounds only add fresh noise.
    let edge_scores = if flags.use_sampler {
        let encoded = scoring.as_ref().expect("sampler implies scoring pass");
        let sc = bound.scorer.as_ref().expect("sampler implies scorer weights");
        let mut per_subject = Vec::with_capacity(batch);
        for (s, subject) in subjects.iter().enumerate() {
            per_subject.push(extractor::score_edges(
                tape,
                encoded.per_subject[s],
                &subject.edges,
                sc.w1,
                sc.b1,
                sc.w2,
                sc.b2,
            )?);
        }
        Some(per_subject)
    } else {
        None
    };

    // Prediction rounds: sample (or reuse) an adjacency, encode, pool, score.
    let mut gammas = Vec::new();
    let mut round_logits = Vec::with_capacity(rounds);
    for round in &noise.rounds {
        let mut adjacencies = Vec::with_capacity(batch);
        for s in 0..batch {
            if let Some(scores) = &edge_scores {
                let sample = extractor::concrete_sample(
                    tape,
                    scores[s].alpha_edges,
                    &subjects[s].edges,
                    n,
                    cfg.tau,
                    Some(&round.edge_noise[s]),
                )?;
                gammas.push(sample.gamma);
                adjacencies.push(if flags.raw_a { a_ids[s] } else { sample.gamma });
            } else {
                adjacencies.push(a_ids[s]);
            }
        }
        let dropout: Vec<Option<(&Tensor, f64)>> = round
            .gin_dropout
            .iter()
            .map(|d| d.as_ref().map(|(t, keep)| (t, *keep)))
            .collect();
        let bn: Vec<BnUse> = (0..bound.gin.len()).map(|_| BnUse::Train).collect();
        let encoded = encoders::gin_encode(
            tape,
            prediction_features,
            &adjacencies,
            &bound.gin,
            &bn,
            &dropout,
        )?;
        for (layer, &id) in encoded.bn_inputs.iter().enumerate() {
            bn_updates.push((BnOwner::Prediction, layer, id));
        }
        let logits = pool_and_classify(tape, &encoded.per_subject, bound)?;
        round_logits.push(logits);
    }

    let mut logits_sum = round_logits[0];
    for &l in &round_logits[1..] {
        logits_sum = tape.add(logits_sum, l)?;
    }
    let avg_logits = tape.scale(logits_sum, 1.0 / rounds as f64);
    let loss_cls = tape.softmax_xent(avg_logits, labels.to_vec())?;

    let loss_entropy = match (&mask, flags.entropy_active()) {
        (Some(m), true) => Some(selector::entropy_loss(tape, m.m_base)?),
        _ => None,
    };
    let loss_align = if flags.align_active() && !gammas.is_empty() {
        Some(extractor::align_loss(tape, &gammas)?)
    } else {
        None
    };

    let total = compose_total(
        tape,
        loss_cls,
        &[
            (loss_entropy, cfg.lambda1),
            (loss_recon, cfg.lambda2),
            (loss_align, cfg.lambda3),
        ],
    )?;

    Ok(ForwardArtifacts {
        avg_logits,
        loss_cls,
        loss_entropy,
        loss_recon,
        loss_align,
        total,
        bn_updates,
        gammas,
        m_base: mask.as_ref().map(|m| m.m_base),
        x_hats,
    })
}

/// Sum-pool each subject's node embeddings and apply the affine head.
fn pool_and_classify(
    tape: &mut Tape,
    per_subject: &[ValueId],
    bound: &BoundModel,
) -> Result<ValueId, DiffError> {
    let mut pooled = Vec::with_capacity(per_subject.len());
    for &h in per_subject {
        pooled.push(tape.sum_colwise(h));
    }
    let stacked = tape.concat_rows(&pooled)?;
    let scores = tape.matmul(stacked, bound.head_w)?;
    tape.add_row(scores, bound.head_b)
}

/// Weighted sum of the classification loss and any active auxiliary terms:
/// `total = cls + sum(lambda_i * term_i)` over the present terms.
pub fn compose_total(
    tape: &mut Tape,
    loss_cls: ValueId,
    terms: &[(Option<ValueId>, f64)],
) -> Result<ValueId, DiffError> {
    let mut total = loss_cls;
    for &(term, lambda) in terms {
        if let Some(id) = term {
            let weighted = tape.scale(id, lambda);
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}

/// Deterministic evaluation outputs for a batch.
pub struct EvalOutput {
    /// Logits (batch x classes).
    pub logits: Tensor,
    /// Noise-free soft adjacency per subject when the sampler is active.
    pub gammas: Vec<Tensor>,
}

/// Noise-free forward pass: no dropout, running batch-norm statistics, and a
/// single sampling round with zero edge noise (all rounds would be
/// identical). Predictions on the same subjects are batch-size invariant.
pub fn eval_forward(
    params: &ModelParams,
    cfg: &TrainConfig,
    subjects: &[&BrainNetwork],
) -> Result<EvalOutput, DiffError> {
    let flags = params.flags;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let batch = subjects.len();
    assert!(batch > 0, "empty batch");

    let x_ids: Vec<ValueId> = subjects
        .iter()
        .map(|s| tape.constant(s.x.clone()))
        .collect();
    let a_ids: Vec<ValueId> = subjects
        .iter()
        .map(|s| tape.constant(s.a.clone()))
        .collect();

    let mask = match bound.w_mask {
        Some(w) => Some(selector::build_mask(&mut tape, w, None)?),
        None => None,
    };
    let masked: Option<Vec<ValueId>> = match &mask {
        Some(m) => {
            let mut out = Vec::with_capacity(batch);
            for &x in &x_ids {
                out.push(tape.mul(x, m.m)?);
            }
            Some(out)
        }
        None => None,
    };
    let scoring_features: &[ValueId] = masked.as_deref().unwrap_or(&x_ids);
    let prediction_features: &[ValueId] = if flags.raw_x {
        &x_ids
    } else {
        masked.as_deref().unwrap_or(&x_ids)
    };

    let no_dropout: Vec<Option<(&Tensor, f64)>> = vec![None; GIN_LAYERS];

    // Soft samples from noise-free scores when the sampler is on.
    let mut gamma_ids = Vec::new();
    let adjacencies: Vec<ValueId> = if flags.use_sampler {
        let layers_params = params.scorer_gin.as_ref().unwrap_or(&params.gin);
        let layers = bound.scorer_gin.as_deref().unwrap_or(&bound.gin);
        let bn: Vec<BnUse> = layers_params
            .iter()
            .map(|l| BnUse::Eval {
                mean: &l.bn_running_mean,
                var: &l.bn_running_var,
            })
            .collect();
        let encoded = encoders::gin_encode(
            &mut tape,
            scoring_features,
            &a_ids,
            layers,
            &bn,
            &no_dropout,
        )?;
        let sc = bound.scorer.as_ref().expect("sampler implies scorer");
        let mut out = Vec::with_capacity(batch);
        for (s, subject) in subjects.iter().enumerate() {
            let scores = extractor::score_edges(
                &mut tape,
                encoded.per_subject[s],
                &subject.edges,
                sc.w1,
                sc.b1,
                sc.w2,
                sc.b2,
            )?;
            let sample = extractor::concrete_sample(
                &mut tape,
                scores.alpha_edges,
                &subject.edges,
                subject.a.rows(),
                cfg.tau,
                None,
            )?;
            gamma_ids.push(sample.gamma);
            out.push(if flags.raw_a { a_ids[s] } else { sample.gamma });
        }
        out
    } else {
        a_ids.clone()
    };

    let bn: Vec<BnUse> = params
        .gin
        .iter()
        .map(|l| BnUse::Eval {
            mean: &l.bn_running_mean,
            var: &l.bn_running_var,
        })
        .collect();
    let encoded = encoders::gin_encode(
        &mut tape,
        prediction_features,
        &adjacencies,
        &bound.gin,
        &bn,
        &no_dropout,
    )?;
    let logits_id = pool_and_classify(&mut tape, &encoded.per_subject, &bound)?;

    Ok(EvalOutput {
        logits: tape.value(logits_id).clone(),
        gammas: gamma_ids
            .into_iter()
            .map(|id| tape.value(id).clone())
            .collect(),
    })
}

/// Stochastic k-sample prediction for one subject.
///
/// Each round draws fresh logistic edge noise, forms the soft adjacency, and
/// in hard mode resolves each kept edge by a Bernoulli draw on its soft
/// probability. Logits are averaged over rounds. With the sampler disabled
/// this reduces to the deterministic single pass.
pub fn predict_k(
    params: &ModelParams,
    cfg: &TrainConfig,
    subject: &BrainNetwork,
    k: usize,
    hard: bool,
    rng: &mut DetRng,
) -> Result<(Tensor, Vec<Tensor>), DiffError> {
    let flags = params.flags;
    if !flags.use_sampler {
        let out = eval_forward(params, cfg, &[subject])?;
        return Ok((out.logits, Vec::new()));
    }
    let k = k.max(1);
    let n = subject.a.rows();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);

    let x_id = tape.constant(subject.x.clone());
    let a_id = tape.constant(subject.a.clone());
    let mask = match bound.w_mask {
        Some(w) => Some(selector::build_mask(&mut tape, w, None)?),
        None => None,
    };
    let masked = match &mask {
        Some(m) => Some(tape.mul(x_id, m.m)?),
        None => None,
    };
    let scoring_features = [masked.unwrap_or(x_id)];
    let prediction_features = if flags.raw_x {
        [x_id]
    } else {
        [masked.unwrap_or(x_id)]
    };

    let no_dropout: Vec<Option<(&Tensor, f64)>> = vec![None; GIN_LAYERS];
    let scoring_params = params.scorer_gin.as_ref().unwrap_or(&params.gin);
    let scoring_layers = bound.scorer_gin.as_deref().unwrap_or(&bound.gin);
    let bn_scoring: Vec<BnUse> = scoring_params
        .iter()
        .map(|l| BnUse::Eval {
            mean: &l.bn_running_mean,
            var: &l.bn_running_var,
        })
        .collect();
    let encoded = encoders::gin_encode(
        &mut tape,
        &scoring_features,
        &[a_id],
        scoring_layers,
        &bn_scoring,
        &no_dropout,
    )?;
    let sc = bound.scorer.as_ref().expect("sampler implies scorer");
    let scores = extractor::score_edges(
        &mut tape,
        encoded.per_subject[0],
        &subject.edges,
        sc.w1,
        sc.b1,
        sc.w2,
        sc.b2,
    )?;

    let bn_pred: Vec<BnUse> = params
        .gin
        .iter()
        .map(|l| BnUse::Eval {
            mean: &l.bn_running_mean,
            var: &l.bn_running_var,
        })
        .collect();

    let mut samples = Vec::with_capacity(k);
    let mut logits_sum = Tensor::zeros(1, params.classes);
    for _ in 0..k {
        let noise = extractor::draw_edge_noise(subject.edges.len(), rng);
        let sample = extractor::concrete_sample(
            &mut tape,
            scores.alpha_edges,
            &subject.edges,
            n,
            cfg.tau,
            Some(&noise),
        )?;
        let adjacency = if hard {
            let gamma_edges = tape.value(sample.gamma_edges).clone();
            let hardened = extractor::bernoulli_harden(&gamma_edges, &subject.edges, n, rng);
            samples.push(hardened.clone());
            if flags.raw_a {
                a_id
            } else {
                tape.constant(hardened)
            }
        } else {
            samples.push(tape.value(sample.gamma).clone());
            if flags.raw_a {
                a_id
            } else {
                sample.gamma
            }
        };
        let encoded = encoders::gin_encode(
            &mut tape,
            &prediction_features,
            &[adjacency],
            &bound.gin,
            &bn_pred,
            &no_dropout,
        )?;
        let logits_id = pool_and_classify(&mut tape, &encoded.per_subject, &bound)?;
        logits_sum.add_assign(tape.value(logits_id));
    }
    let logits = logits_sum.map(|v| v / k as f64);
    Ok((logits, samples))
}

/// Noise-free soft adjacency for one subject (empty when the sampler is off).
pub fn eval_gamma(
    params: &ModelParams,
    cfg: &TrainConfig,
    subject: &BrainNetwork,
) -> Result<Option<Tensor>, DiffError> {
    let out = eval_forward(params, cfg, &[subject])?;
    Ok(out.gammas.into_iter().next())
}

/// Fold one batch's pre-normalization activations into the running
/// batch-norm statistics: `running = (1 - momentum) * running + momentum *
/// batch`, with the unbiased variance entering the running estimate.
pub const BN_MOMENTUM: f64 = 0.1;

pub fn update_running_stats(
    params: &mut ModelParams,
    tape: &Tape,
    bn_updates: &[(BnOwner, usize, ValueId)],
) {
    for &(owner, layer, id) in bn_updates {
        let input = tape.value(id);
        let (mean, var) = column_mean_var(input);
        let m = input.rows() as f64;
        // Population variance normalizes the batch; the unbiased estimate
        // enters the running average (matching standard batch-norm training).
        let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let layer_params = match owner {
            BnOwner::Prediction => &mut params.gin[layer],
            BnOwner::Scoring => {
                &mut params
                    .scorer_gin
                    .as_mut()
                    .expect("scoring stats require a scoring encoder")[layer]
            }
        };
        for c in 0..mean.cols() {
            let rm = layer_params.bn_running_mean.get(0, c);
            let rv = layer_params.bn_running_var.get(0, c);
            layer_params
                .bn_running_mean
                .set(0, c, (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean.get(0, c));
            layer_params.bn_running_var.set(
                0,
                c,
                (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var.get(0, c) * bessel,
            );
        }
    }
}

/// Guard used by tests and the self-check command: the batch-norm epsilon the
/// encoders bake into every normalization.
pub const MODEL_BN_EPS: f64 = BN_EPS;
