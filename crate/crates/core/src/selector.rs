//! Learnable feature-mask selection and its entropy sparsity constraint.
//!
//! The mask is a symmetric matrix of per-connection gates,
//! `M_base = sigmoid(W_mask · W_maskᵀ)`, optionally passed through symmetric
//! dropout in training, and applied to the features as `X′ = X ⊙ M`. The
//! entropy loss pushes every gate toward 0 or 1 so the model commits to a
//! sparse set of connections instead of a smooth soft mask.

use crate::rng::DetRng;
use crate::tape::{DiffError, Tape, ValueId};
use crate::tensor::Tensor;

/// Tape handles produced by [`apply_mask`].
#[derive(Clone, Copy, Debug)]
pub struct MaskOutput {
    /// sigmoid(W_mask·W_maskᵀ), pre-dropout; the entropy loss input.
    pub m_base: ValueId,
    /// Mask actually applied: equals `m_base` unless dropout was supplied.
    pub m: ValueId,
    /// X ⊙ M.
    pub x_masked: ValueId,
}

/// Tape handles for the mask alone, before it touches any features.
#[derive(Clone, Copy, Debug)]
pub struct MaskIds {
    /// sigmoid(W_mask·W_maskᵀ), pre-dropout; the entropy loss input.
    pub m_base: ValueId,
    /// Mask to apply: equals `m_base` unless dropout was supplied.
    pub m: ValueId,
}

/// One inverted-dropout decision per unordered index pair (diagonal included),
/// mirrored to both cells so the mask stays symmetric. Entries are 0 or 1.
pub fn draw_pair_dropout(n: usize, rate: f64, rng: &mut DetRng) -> Tensor {
    let mut mask = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let keep = if rng.uniform() < rate { 0.0 } else { 1.0 };
            mask.set(i, j, keep);
            mask.set(j, i, keep);
        }
    }
    mask
}

/// Build the mask and apply it to the features.
///
/// `dropout` carries a pre-drawn 0/1 pair-symmetric mask and the keep
/// probability; `None` is evaluation mode (and training with dropout rate 0).
/// Pre-drawing keeps gradient checks meaningful: the same realization is
/// reused on every probe.
pub fn apply_mask(
    tape: &mut Tape,
    x: ValueId,
    w_mask: ValueId,
    dropout: Option<(&Tensor, f64)>,
) -> Result<MaskOutput, DiffError> {
    let ids = build_mask(tape, w_mask, dropout)?;
    let x_masked = tape.mul(x, ids.m)?;
    Ok(MaskOutput {
        m_base: ids.m_base,
        m: ids.m,
        x_masked,
    })
}

/// Build the mask without applying it, for callers that share one mask
/// across a whole batch of feature matrices.
pub fn build_mask(
    tape: &mut Tape,
    w_mask: ValueId,
    dropout: Option<(&Tensor, f64)>,
) -> Result<MaskIds, DiffError> {
    let wt = tape.transpose(w_mask);
    let scores = tape.matmul(w_mask, wt)?;
    let m_base = tape.sigmoid(scores);
    let m = match dropout {
        Some((mask, keep)) => tape.dropout(m_base, mask.clone(), keep)?,
        None => m_base,
    };
    Ok(MaskIds { m_base, m })
}

/// Sparsity entropy of the pre-dropout mask: mean over rows of the summed
/// per-gate binary entropy, (1/n)·Σᵢ Σⱼ [−p·ln p − (1−p)·ln(1−p)].
/// Zero exactly when every gate saturates at 0 or 1; n·ln 2 at all-0.5.
pub fn entropy_loss(tape: &mut Tape, m_base: ValueId) -> Result<ValueId, DiffError> {
    let (rows, cols) = tape.value(m_base).shape();
    if let Some(&bad) = tape
        .value(m_base)
        .data()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(DiffError::Domain {
            op: "entropy_loss",
            detail: alloc::format!("mask entry {bad} outside [0, 1]"),
        });
    }
    let ones = tape.constant(Tensor::full(rows, cols, 1.0));
    let complement = tape.sub(ones, m_base)?;
    let plogp = tape.xlogx(m_base)?;
    let qlogq = tape.xlogx(complement)?;
    let both = tape.add(plogp, qlogq)?;
    let total = tape.sum_all(both);
    Ok(tape.scale(total, -1.0 / rows as f64))
}
