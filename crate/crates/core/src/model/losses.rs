//! Training losses: token-level cross-entropy, smooth-L1 count regression,
//! and their weighted combination.

use ndarray::IxDyn;

use crate::latex_norm::CountVector;
use crate::tensor::{Array, Var};

use super::{DecoderOutput, LengthTarget, LossWeights, ModelError};

/// Mean next-token cross-entropy over non-pad positions. `targets` are the
/// inputs shifted left by one; positions where `mask` is false (padding) do
/// not contribute.
pub fn language_modeling_loss<'t>(
    output: &DecoderOutput<'t>,
    targets: &[Vec<u32>],
    mask: &[Vec<bool>],
) -> Result<Var<'t>, ModelError> {
    let shape = output.logits.shape();
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    if targets.len() != b || targets.iter().any(|r| r.len() != s) {
        return Err(ModelError::ShapeMismatch(format!(
            "targets do not match logits [{b}, {s}]"
        )));
    }
    if mask.len() != b || mask.iter().any(|r| r.len() != s) {
        return Err(ModelError::ShapeMismatch("mask shape".into()));
    }
    let flat_targets: Vec<usize> = targets
        .iter()
        .flat_map(|r| r.iter().map(|&t| t as usize))
        .collect();
    if let Some(&bad) = flat_targets.iter().find(|&&t| t >= c) {
        return Err(ModelError::ShapeMismatch(format!(
            "target id {bad} outside vocabulary of size {c}"
        )));
    }
    let flat_mask: Vec<bool> = mask.iter().flatten().copied().collect();
    Ok(output
        .logits
        .reshape(&[b * s, c])
        .cross_entropy_mean(&flat_targets, &flat_mask))
}

/// Smooth-L1 between predicted and ground-truth counts, averaged over all
/// `B x C` entries; in scalar mode both sides collapse to their row-sums
/// first.
pub fn length_loss<'t>(
    predicted_counts: &Var<'t>,
    target_counts: &[CountVector],
    target: LengthTarget,
) -> Result<Var<'t>, ModelError> {
    let shape = predicted_counts.shape();
    let (b, c) = (shape[0], shape[1]);
    if target_counts.len() != b || target_counts.iter().any(|t| t.counts().len() != c) {
        return Err(ModelError::ShapeMismatch(format!(
            "count targets do not match prediction [{b}, {c}]"
        )));
    }
    match target {
        LengthTarget::Counts => {
            let data: Vec<f64> = target_counts
                .iter()
                .flat_map(|t| t.counts().iter().copied())
                .collect();
            let target = Array::from_shape_vec(IxDyn(&[b, c]), data).unwrap();
            Ok(predicted_counts.smooth_l1_mean(&target))
        }
        LengthTarget::Scalar => {
            let totals: Vec<f64> = target_counts.iter().map(|t| t.total()).collect();
            let target = Array::from_shape_vec(IxDyn(&[b]), totals).unwrap();
            Ok(predicted_counts.sum_axis(1).smooth_l1_mean(&target))
        }
    }
}

/// Composite loss; a disabled length path contributes exactly zero.
pub fn total_loss<'t>(
    lm: &Var<'t>,
    len: Option<&Var<'t>>,
    weights: &LossWeights,
) -> Result<Var<'t>, ModelError> {
    let combined = match len {
        Some(l) => lm.scale(weights.lambda1).add(&l.scale(weights.lambda2)),
        None => lm.scale(weights.lambda1),
    };
    if !combined.scalar().is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(combined)
}
