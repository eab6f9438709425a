//! Edge scoring, binary-concrete subgraph sampling, and the batch alignment
//! loss.
//!
//! Every unordered edge of a subject's adjacency gets a score
//! α = scorer([H_v | H_u]) (symmetrized over the two directions), then a soft
//! sampling weight γ = sigmoid((α + D)/τ) with one logistic-noise draw D per
//! unordered edge. Training keeps the soft γ as edge weights so gradients
//! flow; hard Bernoulli draws are an explicit opt-in for inference.

use alloc::vec::Vec;

use crate::fmath;
use crate::rng::DetRng;
use crate::tape::{DiffError, Tape, ValueId};
use crate::tensor::Tensor;

/// Edge scores from [`score_edges`].
#[derive(Clone, Copy, Debug)]
pub struct EdgeScores {
    /// Per unordered edge, m×1, aligned with the input edge list.
    pub alpha_edges: ValueId,
    /// Scattered n×n symmetric matrix, zero off the edge support.
    pub alpha: ValueId,
}

/// Score every unordered edge with an MLP (2d→d→1, ReLU between) over the
/// concatenated endpoint representations, averaging the two directions.
pub fn score_edges(
    tape: &mut Tape,
    h: ValueId,
    edges: &[(usize, usize)],
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
) -> Result<EdgeScores, DiffError> {
    let n = tape.value(h).rows();
    let m = edges.len();
    let mut heads = Vec::with_capacity(2 * m);
    let mut tails = Vec::with_capacity(2 * m);
    for &(i, j) in edges {
        heads.push(i);
        tails.push(j);
    }
    for &(i, j) in edges {
        heads.push(j);
        tails.push(i);
    }
    let hv = tape.gather_rows(h, heads)?;
    let hu = tape.gather_rows(h, tails)?;
    let pairs = tape.concat_cols(hv, hu)?;
    let l1 = tape.matmul(pairs, w1)?;
    let l1 = tape.add_row(l1, b1)?;
    let act = tape.relu(l1);
    let l2 = tape.matmul(act, w2)?;
    let scores = tape.add_row(l2, b2)?;
    let forward = tape.slice_rows(scores, 0, m)?;
    let backward = tape.slice_rows(scores, m, m)?;
    let summed = tape.add(forward, backward)?;
    let alpha_edges = tape.scale(summed, 0.5);
    let alpha = tape.scatter_edges(alpha_edges, edges.to_vec(), n)?;
    Ok(EdgeScores { alpha_edges, alpha })
}

/// One logistic-noise draw per unordered edge: D = logit(U), U ~ (0,1) open.
pub fn draw_edge_noise(m: usize, rng: &mut DetRng) -> Tensor {
    let mut d = Tensor::zeros(m, 1);
    for e in 0..m {
        let u = rng.open_open();
        d.set(e, 0, fmath::ln(u) - fmath::ln(1.0 - u));
    }
    d
}

/// A soft subgraph sample on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SoftSample {
    /// γ per unordered edge, m×1.
    pub gamma_edges: ValueId,
    /// γ scattered to an n×n symmetric matrix, zero off the support.
    pub gamma: ValueId,
}

/// γ = sigmoid((α + D)/τ) per unordered edge, mirrored to both directions.
/// `noise = None` is the deterministic variant (D = 0) used for evaluation
/// and interpretation.
pub fn concrete_sample(
    tape: &mut Tape,
    alpha_edges: ValueId,
    edges: &[(usize, usize)],
    n: usize,
    tau: f64,
    noise: Option<&Tensor>,
) -> Result<SoftSample, DiffError> {
    if !(tau > 0.0) {
        return Err(DiffError::Domain {
            op: "concrete_sample",
            detail: alloc::format!("temperature {tau} must be positive"),
        });
    }
    let perturbed = match noise {
        Some(d) => {
            let d_const = tape.constant(d.clone());
            tape.add(alpha_edges, d_const)?
        }
        None => alpha_edges,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let gamma_edges = tape.sigmoid(scaled);
    let gamma = tape.scatter_edges(gamma_edges, edges.to_vec(), n)?;
    Ok(SoftSample { gamma_edges, gamma })
}

/// Hard Bernoulli draw from soft per-edge probabilities: a binary symmetric
/// adjacency, one uniform per unordered edge. Not differentiable — the
/// result is a plain tensor for use as a constant.
pub fn bernoulli_harden(
    gamma_edges: &Tensor,
    edges: &[(usize, usize)],
    n: usize,
    rng: &mut DetRng,
) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for (e, &(i, j)) in edges.iter().enumerate() {
        if rng.uniform() < gamma_edges.get(e, 0) {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    a
}

/// Mean per-cell population standard deviation over every soft sample in the
/// batch (all subjects × all rounds): (1/n²)·Σ_{i,j} std({γ^(t)[i,j]}).
pub fn align_loss(tape: &mut Tape, gammas: &[ValueId]) -> Result<ValueId, DiffError> {
    if gammas.is_empty() {
        return Err(DiffError::Domain {
            op: "align_loss",
            detail: alloc::string::String::from("empty sample batch"),
        });
    }
    let std = tape.cell_std(gammas)?;
    let numel = tape.value(std).numel();
    let total = tape.sum_all(std);
    Ok(tape.scale(total, 1.0 / numel as f64))
}
