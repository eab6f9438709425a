//! Edge-score aggregation for interpretation: per-checkpoint score maps,
//! top-k connection extraction, group-block summaries, and recovery scoring
//! against planted ground truth.
//!
//! Scores are the noise-free soft adjacency (sigmoid of scaled edge scores,
//! no sampling noise), so a checkpoint always yields the same map. Subjects
//! are accumulated in canonical dataset order, which makes the map invariant
//! to how the caller lists them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::braindata::Dataset;
use crate::metrics;
use crate::model;
use crate::tape::DiffError;
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;

/// Interpretation failures.
#[derive(Clone, Debug, PartialEq)]
pub enum InterpretError {
    /// No subjects were named.
    NoSubjects,
    UnknownSubject(String),
    /// The checkpoint was trained without the structure extractor, so it has
    /// no edge scores to aggregate.
    NoExtractor,
    /// `k = 0` asks for an empty ranking.
    ZeroK,
    EmptyTruth,
    /// A ground-truth pair is a self-loop or out of range.
    BadTruth { i: usize, j: usize },
    /// Ground truth labels every pair identically, so a ranking quality is
    /// undefined.
    UniformTruth,
    Graph(DiffError),
}

impl core::fmt::Display for InterpretError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            InterpretError::NoSubjects => write!(f, "no subjects to aggregate"),
            InterpretError::UnknownSubject(id) => {
                write!(f, "subject '{id}' is not in the dataset")
            }
            InterpretError::NoExtractor => {
                write!(f, "checkpoint has no structure extractor (sampler disabled)")
            }
            InterpretError::ZeroK => write!(f, "k must be at least 1"),
            InterpretError::EmptyTruth => write!(f, "ground truth has no edges"),
            InterpretError::BadTruth { i, j } => {
                write!(f, "ground-truth pair ({i}, {j}) is not a valid node pair")
            }
            InterpretError::UniformTruth => {
                write!(f, "ground truth covers every pair; recovery is undefined")
            }
            InterpretError::Graph(e) => write!(f, "computation failed: {e}"),
        }
    }
}

impl core::error::Error for InterpretError {}

impl From<DiffError> for InterpretError {
    fn from(e: DiffError) -> Self {
        InterpretError::Graph(e)
    }
}

/// Mean noise-free soft adjacency over a subject set: symmetric, zero
/// diagonal, entries in [0, 1]. A cell scores the average across *all*
/// subjects; subjects whose edge support misses the cell contribute 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreMap {
    pub n: usize,
    pub scores: Tensor,
    pub subject_count: usize,
    /// Node group labels carried over from the dataset, when present.
    pub group_labels: Option<Vec<String>>,
}

/// Aggregate the checkpoint's noise-free edge scores over the named
/// subjects. Deterministic, and bitwise-invariant to the order the ids are
/// listed in (subjects accumulate in dataset order).
pub fn score_map(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    subject_ids: &[String],
) -> Result<EdgeScoreMap, InterpretError> {
    if subject_ids.is_empty() {
        return Err(InterpretError::NoSubjects);
    }
    if !checkpoint.config.flags.use_sampler {
        return Err(InterpretError::NoExtractor);
    }
    let mut idx = Vec::with_capacity(subject_ids.len());
    for id in subject_ids {
        idx.push(
            dataset
                .index_of(id)
                .ok_or_else(|| InterpretError::UnknownSubject(id.clone()))?,
        );
    }
    idx.sort_unstable();

    let n = dataset.n;
    let mut sum = Tensor::zeros(n, n);
    for &i in &idx {
        let gamma = model::eval_gamma(&checkpoint.params, &checkpoint.config, &dataset.networks[i])?
            .ok_or(InterpretError::NoExtractor)?;
        for (s, g) in sum.data_mut().iter_mut().zip(gamma.data()) {
            *s += g;
        }
    }
    let count = idx.len();
    let scores = sum.map(|v| v / count as f64);
    Ok(EdgeScoreMap {
        n,
        scores,
        subject_count: count,
        group_labels: dataset.node_groups.clone(),
    })
}

/// One ranked connection, with group labels when the map carries them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEdge {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub group_i: Option<String>,
    pub group_j: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEdges {
    pub edges: Vec<TopEdge>,
    /// True when fewer than `k` nonzero cells existed, so the list is short.
    pub truncated: bool,
}

/// The `k` highest-scoring unordered pairs, descending; equal scores order
/// lexicographically by `(i, j)`. Asking for more than the number of nonzero
/// cells returns them all with the `truncated` flag set.
pub fn top_k_edges(map: &EdgeScoreMap, k: usize) -> Result<TopEdges, InterpretError> {
    if k == 0 {
        return Err(InterpretError::ZeroK);
    }
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..map.n {
        for j in (i + 1)..map.n {
            let s = map.scores.get(i, j);
            if s != 0.0 {
                cells.push((i, j, s));
            }
        }
    }
    cells.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let truncated = k > cells.len();
    cells.truncate(k);
    let label = |node: usize| {
        map.group_labels
            .as_ref()
            .and_then(|g| g.get(node).cloned())
    };
    let edges = cells
        .into_iter()
        .map(|(i, j, score)| TopEdge {
            i,
            j,
            score,
            group_i: label(i),
            group_j: label(j),
        })
        .collect();
    Ok(TopEdges { edges, truncated })
}

/// ROC-AUC of the map's scores as a detector of the planted edges, computed
/// over every unordered node pair (zero cells included as candidates).
pub fn recovery_auc(
    map: &EdgeScoreMap,
    ground_truth: &[(usize, usize)],
) -> Result<f64, InterpretError> {
    if ground_truth.is_empty() {
        return Err(InterpretError::EmptyTruth);
    }
    let mut truth = BTreeSet::new();
    for &(i, j) in ground_truth {
        if i == j || i >= map.n || j >= map.n {
            return Err(InterpretError::BadTruth { i, j });
        }
        truth.insert((i.min(j), i.max(j)));
    }
    let mut scores = Vec::new();
    let mut positives = Vec::new();
    for i in 0..map.n {
        for j in (i + 1)..map.n {
            scores.push(map.scores.get(i, j));
            positives.push(truth.contains(&(i, j)));
        }
    }
    metrics::roc_auc(&scores, &positives).ok_or(InterpretError::UniformTruth)
}

/// Mean score of each group-pair block (unordered group pairs, off-diagonal
/// node pairs only, zero cells included). `None` when the map has no group
/// labels. Sorted by group-pair name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBlock {
    pub group_a: String,
    pub group_b: String,
    pub mean: f64,
    /// Number of node pairs in the block.
    pub pairs: usize,
}

pub fn group_block_means(map: &EdgeScoreMap) -> Option<Vec<GroupBlock>> {
    let labels = map.group_labels.as_ref()?;
    let mut blocks: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for i in 0..map.n {
        for j in (i + 1)..map.n {
            let (a, b) = if labels[i] <= labels[j] {
                (labels[i].clone(), labels[j].clone())
            } else {
                (labels[j].clone(), labels[i].clone())
            };
            let entry = blocks.entry((a, b)).or_insert((0.0, 0));
            entry.0 += map.scores.get(i, j);
            entry.1 += 1;
        }
    }
    Some(
        blocks
            .into_iter()
            .map(|((group_a, group_b), (sum, pairs))| GroupBlock {
                group_a,
                group_b,
                mean: sum / pairs as f64,
                pairs,
            })
            .collect(),
    )
}
