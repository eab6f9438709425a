//! Composite objective, training loop, checkpointing, and fold-level
//! evaluation.
//!
//! Training is deterministic per seed: epoch shuffles, dropout, and sampling
//! noise all come from streams derived from `(seed, purpose, epoch, batch)`,
//! and every reduction runs in a fixed order. Two runs with one config are
//! bitwise-identical, including optimizer state and running statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::braindata::{BrainNetwork, Dataset, SplitFold, SplitPlan};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    draw_batch_noise, forward_batch, update_running_stats, ModelFlags, ModelParams,
};
use crate::rng::{self, tags, DetRng};
use crate::tape::{DiffError, Tape};
use crate::tensor::Tensor;

/// Every training hyperparameter, with the tuned defaults. Deserializing
/// fills missing fields from those defaults and rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Entropy (mask sparsity) weight.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
    /// Alignment weight.
    pub lambda3: f64,
    /// Concrete-relaxation temperature.
    pub tau: f64,
    /// Subgraph samples averaged per prediction.
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dropout rate on the feature mask.
    pub feature_dropout: f64,
    /// Dropout rate inside GIN layers.
    pub gin_dropout: f64,
    pub hidden_dim: usize,
    pub seed: u64,
    pub flags: ModelFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.01,
            lambda2: 0.1,
            lambda3: 0.5,
            tau: 1.0,
            k: 5,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            feature_dropout: 0.2,
            gin_dropout: 0.5,
            hidden_dim: 100,
            seed: 42,
            flags: ModelFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.tau > 0.0) {
            return Err(format!("tau = {} must be positive", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr = {} must be positive", self.lr));
        }
        for (name, v) in [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("feature_dropout", self.feature_dropout),
            ("gin_dropout", self.gin_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Training and evaluation failures.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    BadConfig(String),
    EmptySplit { part: &'static str },
    UnknownSubject(String),
    Graph(DiffError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::EmptySplit { part } => {
                write!(f, "split has no subjects in its {part} part")
            }
            TrainError::UnknownSubject(id) => {
                write!(f, "subject '{id}' is not in the dataset")
            }
            TrainError::Graph(e) => write!(f, "computation failed: {e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Graph(e)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state at one point in time. Everything needed to
/// evaluate (parameters, running statistics, config) or resume (optimizer
/// moments, epoch counter; per-epoch noise streams are derived from the seed,
/// so no generator state needs saving).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs when this checkpoint was captured.
    pub epoch: usize,
    /// Validation accuracy that selected this checkpoint (the final
    /// checkpoint records its last measured overall validation accuracy).
    pub val_accuracy: f64,
}

/// Per-epoch training diagnostics: batch-mean loss components and validation
/// accuracy on the in-distribution and held-out-site parts of the val split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub entropy: f64,
    pub recon: f64,
    pub align: f64,
    pub id_val_accuracy: Option<f64>,
    pub ood_val_accuracy: Option<f64>,
}

/// Output of one training run: checkpoints selected by best ID-validation
/// and best OOD-validation accuracy (earliest epoch wins ties), the final
/// state, per-epoch history, and the per-step total-loss trajectory.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub best_id: Option<Checkpoint>,
    pub best_ood: Option<Checkpoint>,
    pub final_checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

fn resolve_ids(
    dataset: &Dataset,
    ids: &[String],
    part: &'static str,
) -> Result<Vec<usize>, TrainError> {
    if ids.is_empty() {
        return Err(TrainError::EmptySplit { part });
    }
    ids.iter()
        .map(|id| {
            dataset
                .index_of(id)
                .ok_or_else(|| TrainError::UnknownSubject(id.clone()))
        })
        .collect()
}

/// Deterministic evaluation logits for a list of subjects, computed in
/// fixed-size batches (results are batch-size invariant).
pub fn eval_logits(
    params: &ModelParams,
    cfg: &TrainConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Tensor, TrainError> {
    let classes = dataset.classes();
    let mut logits = Tensor::zeros(indices.len(), classes);
    let chunk = cfg.batch_size.max(1);
    for (c, block) in indices.chunks(chunk).enumerate() {
        let subjects: Vec<&BrainNetwork> = block.iter().map(|&i| &dataset.networks[i]).collect();
        let out = crate::model::eval_forward(params, cfg, &subjects)?;
        for (r, _) in block.iter().enumerate() {
            for j in 0..classes {
                logits.set(c * chunk + r, j, out.logits.get(r, j));
            }
        }
    }
    Ok(logits)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = metrics::predictions(logits);
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len().max(1) as f64
}

/// Accuracy over the subset of `indices` positions listed in `subset`.
fn subset_accuracy(logits: &Tensor, labels: &[usize], subset: &[usize]) -> Option<f64> {
    if subset.is_empty() {
        return None;
    }
    let classes = logits.cols();
    let sub = Tensor::from_fn(subset.len(), classes, |i, j| logits.get(subset[i], j));
    let sub_labels: Vec<usize> = subset.iter().map(|&i| labels[i]).collect();
    Some(accuracy(&sub, &sub_labels))
}

/// Train one fold: seeded shuffled mini-batches, Adam updates, running-stat
/// folding after every batch, and per-epoch validation with dual best-model
/// tracking (ID-val and OOD-val selections kept separately).
pub fn train(dataset: &Dataset, fold: &SplitFold, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    cfg.check().map_err(TrainError::BadConfig)?;
    let train_idx = resolve_ids(dataset, &fold.train_ids, "train")?;
    let val_idx = resolve_ids(dataset, &fold.val_ids, "validation")?;
    resolve_ids(dataset, &fold.test_ids, "test")?;

    let n = dataset.n;
    let classes = dataset.classes();
    let mut params = ModelParams::init(n, classes, cfg);
    let shapes: Vec<(usize, usize)> = params.visit().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);

    let val_labels: Vec<usize> = val_idx.iter().map(|&i| dataset.networks[i].label).collect();
    let val_id_pos: Vec<usize> = (0..val_idx.len())
        .filter(|&p| dataset.networks[val_idx[p]].site != fold.ood_site)
        .collect();
    let val_ood_pos: Vec<usize> = (0..val_idx.len())
        .filter(|&p| dataset.networks[val_idx[p]].site == fold.ood_site)
        .collect();

    let mut best_id: Option<Checkpoint> = None;
    let mut best_ood: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut last_val = 0.0;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = DetRng::new(rng::derive_seed(cfg.seed, &[tags::SHUFFLE, epoch as u64]));
        shuffle_rng.shuffle(&mut order);

        let mut sums = [0.0f64; 5]; // total, cls, entropy, recon, align
        let mut batches = 0usize;
        for (b, block) in order.chunks(cfg.batch_size).enumerate() {
            let subjects: Vec<&BrainNetwork> =
                block.iter().map(|&i| &dataset.networks[i]).collect();
            let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
            let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
            let noise = draw_batch_noise(cfg, n, &edge_counts, epoch as u64, b as u64);

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let art = forward_batch(&mut tape, &bound, cfg, &subjects, &labels, &noise)?;
            let grads = tape.backward(art.total)?;

            sums[0] += tape.value(art.total).item();
            sums[1] += tape.value(art.loss_cls).item();
            sums[2] += art.loss_entropy.map_or(0.0, |id| tape.value(id).item());
            sums[3] += art.loss_recon.map_or(0.0, |id| tape.value(id).item());
            sums[4] += art.loss_align.map_or(0.0, |id| tape.value(id).item());
            batches += 1;
            step_losses.push(tape.value(art.total).item());

            update_running_stats(&mut params, &tape, &art.bn_updates);
            let grad_refs: Vec<Option<&Tensor>> =
                bound.order.iter().map(|&id| grads.get(id)).collect();
            adam.step(&mut params.visit_mut(), &grad_refs);
        }

        let val_logits = eval_logits(&params, cfg, dataset, &val_idx)?;
        let id_acc = subset_accuracy(&val_logits, &val_labels, &val_id_pos);
        let ood_acc = subset_accuracy(&val_logits, &val_labels, &val_ood_pos);
        last_val = accuracy(&val_logits, &val_labels);

        let denom = batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            total: sums[0] / denom,
            cls: sums[1] / denom,
            entropy: sums[2] / denom,
            recon: sums[3] / denom,
            align: sums[4] / denom,
            id_val_accuracy: id_acc,
            ood_val_accuracy: ood_acc,
        });

        let capture = |acc: f64| Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params: params.clone(),
            adam: adam.clone(),
            epoch: epoch + 1,
            val_accuracy: acc,
        };
        if let Some(acc) = id_acc {
            if best_id.as_ref().map_or(true, |c| acc > c.val_accuracy) {
                best_id = Some(capture(acc));
            }
        }
        if let Some(acc) = ood_acc {
            if best_ood.as_ref().map_or(true, |c| acc > c.val_accuracy) {
                best_ood = Some(capture(acc));
            }
        }
    }

    let final_checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params,
        adam,
        epoch: cfg.epochs,
        val_accuracy: last_val,
    };
    Ok(TrainResult {
        best_id,
        best_ood,
        final_checkpoint,
        history,
        step_losses,
    })
}

/// Deterministic evaluation of a checkpoint on named subjects, with the
/// ID/OOD breakdown when the held-out site is given.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    subject_ids: &[String],
    ood_site: Option<&str>,
) -> Result<MetricsReport, TrainError> {
    let idx = resolve_ids(dataset, subject_ids, "evaluation")?;
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.networks[i].label).collect();
    let logits = eval_logits(&checkpoint.params, &checkpoint.config, dataset, &idx)?;
    let flags: Option<Vec<bool>> = ood_site.map(|site| {
        idx.iter()
            .map(|&i| dataset.networks[i].site == site)
            .collect()
    });
    Ok(metrics::metrics_report(
        &logits,
        &labels,
        dataset.classes(),
        flags.as_deref(),
    ))
}

/// One fold's cross-validation outcome. ID accuracy comes from the
/// best-ID-validation checkpoint on the in-distribution test subjects; OOD
/// accuracy from the best-OOD-validation checkpoint on the held-out site's
/// test subjects (falling back to the ID selection when the fold has no
/// OOD-validation subjects); overall accuracy from the best-ID checkpoint on
/// the whole test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub ood_site: String,
    pub seed: u64,
    pub id_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub overall_accuracy: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvColumn {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub id: Option<CvColumn>,
    pub ood: Option<CvColumn>,
    pub overall: CvColumn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResults {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: CvAggregate,
}

fn column(values: &[f64]) -> Option<CvColumn> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = metrics::mean_std(values);
    Some(CvColumn { mean, std })
}

/// Train and evaluate one fold with its derived seed. Folds are fully
/// independent, so callers may run them in any order (or in parallel) and
/// still aggregate identical results.
pub fn run_fold(
    dataset: &Dataset,
    fold: &SplitFold,
    cfg: &TrainConfig,
) -> Result<(FoldOutcome, TrainResult), TrainError> {
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = rng::derive_seed(cfg.seed, &[tags::FOLD, fold.fold as u64]);
    let result = train(dataset, fold, &fold_cfg)?;

    let test_idx = resolve_ids(dataset, &fold.test_ids, "test")?;
    let test_labels: Vec<usize> =
        test_idx.iter().map(|&i| dataset.networks[i].label).collect();
    let id_pos: Vec<usize> = (0..test_idx.len())
        .filter(|&p| dataset.networks[test_idx[p]].site != fold.ood_site)
        .collect();
    let ood_pos: Vec<usize> = (0..test_idx.len())
        .filter(|&p| dataset.networks[test_idx[p]].site == fold.ood_site)
        .collect();

    let id_ckpt = result
        .best_id
        .as_ref()
        .unwrap_or(&result.final_checkpoint);
    let ood_ckpt = result
        .best_ood
        .as_ref()
        .or(result.best_id.as_ref())
        .unwrap_or(&result.final_checkpoint);

    let id_logits = eval_logits(&id_ckpt.params, &id_ckpt.config, dataset, &test_idx)?;
    let id_accuracy = subset_accuracy(&id_logits, &test_labels, &id_pos);
    let overall_accuracy = accuracy(&id_logits, &test_labels);
    let ood_logits = eval_logits(&ood_ckpt.params, &ood_ckpt.config, dataset, &test_idx)?;
    let ood_accuracy = subset_accuracy(&ood_logits, &test_labels, &ood_pos);

    let report = evaluate(id_ckpt, dataset, &fold.test_ids, Some(&fold.ood_site))?;
    let outcome = FoldOutcome {
        fold: fold.fold,
        ood_site: fold.ood_site.clone(),
        seed: fold_cfg.seed,
        id_accuracy,
        ood_accuracy,
        overall_accuracy,
        report,
    };
    Ok((outcome, result))
}

/// Mean and sample standard deviation per accuracy column over fold
/// outcomes. ID/OOD columns aggregate only the folds where the part was
/// non-empty.
pub fn aggregate_folds(folds: Vec<FoldOutcome>) -> Result<CvResults, TrainError> {
    if folds.is_empty() {
        return Err(TrainError::EmptySplit { part: "fold plan" });
    }
    let ids: Vec<f64> = folds.iter().filter_map(|f| f.id_accuracy).collect();
    let oods: Vec<f64> = folds.iter().filter_map(|f| f.ood_accuracy).collect();
    let overalls: Vec<f64> = folds.iter().map(|f| f.overall_accuracy).collect();
    let aggregate = CvAggregate {
        id: column(&ids),
        ood: column(&oods),
        overall: column(&overalls).expect("folds checked non-empty"),
    };
    Ok(CvResults { folds, aggregate })
}

/// Train and evaluate every fold of a split plan sequentially.
pub fn run_cv(
    dataset: &Dataset,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<CvResults, TrainError> {
    let mut folds = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        folds.push(run_fold(dataset, fold, cfg)?.0);
    }
    aggregate_folds(folds)
}

/// Plain GIN classifier trained by standard empirical risk minimization,
/// assembled independently of [`forward_batch`] so that ablation equivalence
/// (all components off matches this exactly) is a genuine cross-check rather
/// than the same code path compared with itself. It follows the same seeding
/// contract: identical init draws, epoch shuffles, and dropout streams.
pub fn erm_baseline_losses(
    dataset: &Dataset,
    fold: &SplitFold,
    cfg: &TrainConfig,
    max_steps: usize,
) -> Result<Vec<f64>, TrainError> {
    cfg.check().map_err(TrainError::BadConfig)?;
    let train_idx = resolve_ids(dataset, &fold.train_ids, "train")?;
    let n = dataset.n;
    let classes = dataset.classes();

    let mut base_cfg = cfg.clone();
    base_cfg.flags = ModelFlags::baseline();
    let mut params = ModelParams::init(n, classes, &base_cfg);
    let shapes: Vec<(usize, usize)> = params.visit().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = AdamState::new(base_cfg.lr, &shapes);

    let mut losses = Vec::with_capacity(max_steps);
    'epochs: for epoch in 0..base_cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            DetRng::new(rng::derive_seed(base_cfg.seed, &[tags::SHUFFLE, epoch as u64]));
        shuffle_rng.shuffle(&mut order);

        for (b, block) in order.chunks(base_cfg.batch_size).enumerate() {
            if losses.len() >= max_steps {
                break 'epochs;
            }
            let subjects: Vec<&BrainNetwork> =
                block.iter().map(|&i| &dataset.networks[i]).collect();
            let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();

            // Same dropout stream and draw order as the full trainer with
            // every component off: no scoring-pass draws, one round.
            let mut gin_stream = DetRng::new(rng::derive_seed(
                base_cfg.seed,
                &[tags::GIN_DROPOUT, epoch as u64, b as u64],
            ));
            let batch = subjects.len();
            let dropout_masks: Vec<Option<(Tensor, f64)>> = (0..params.gin.len())
                .map(|_| {
                    if base_cfg.gin_dropout > 0.0 {
                        let mut t = Tensor::zeros(batch * n, base_cfg.hidden_dim);
                        for v in t.data_mut() {
                            *v = if gin_stream.uniform() < base_cfg.gin_dropout {
                                0.0
                            } else {
                                1.0
                            };
                        }
                        Some((t, 1.0 - base_cfg.gin_dropout))
                    } else {
                        None
                    }
                })
                .collect();

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x_ids: Vec<_> = subjects.iter().map(|s| tape.constant(s.x.clone())).collect();
            let a_ids: Vec<_> = subjects.iter().map(|s| tape.constant(s.a.clone())).collect();
            let dropout: Vec<Option<(&Tensor, f64)>> = dropout_masks
                .iter()
                .map(|d| d.as_ref().map(|(t, keep)| (t, *keep)))
                .collect();
            let bn: Vec<crate::encoders::BnUse> =
                (0..bound.gin.len()).map(|_| crate::encoders::BnUse::Train).collect();
            let encoded =
                crate::encoders::gin_encode(&mut tape, &x_ids, &a_ids, &bound.gin, &bn, &dropout)?;
            let mut pooled = Vec::with_capacity(batch);
            for &h in &encoded.per_subject {
                pooled.push(tape.sum_colwise(h));
            }
            let stacked = tape.concat_rows(&pooled)?;
            let scores = tape.matmul(stacked, bound.head_w)?;
            let logits = tape.add_row(scores, bound.head_b)?;
            // A single sample round averages trivially; the mean over one
            // round is an exact multiply by 1.
            let avg = tape.scale(logits, 1.0);
            let loss = tape.softmax_xent(avg, labels)?;
            let grads = tape.backward(loss)?;

            losses.push(tape.value(loss).item());

            let bn_updates: Vec<_> = encoded
                .bn_inputs
                .iter()
                .enumerate()
                .map(|(l, &id)| (crate::model::BnOwner::Prediction, l, id))
                .collect();
            update_running_stats(&mut params, &tape, &bn_updates);
            let grad_refs: Vec<Option<&Tensor>> =
                bound.order.iter().map(|&id| grads.get(id)).collect();
            adam.step(&mut params.visit_mut(), &grad_refs);
        }
    }
    Ok(losses)
}
