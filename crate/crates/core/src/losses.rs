//! Classification, attention and joint losses.
//!
//! Both cross-entropies are batch means (the attention one additionally
//! averaged over grid cells) so that their magnitudes are comparable and
//! the balance parameter means the same thing at any batch size. The tape
//! ops [`Tape::bce_class`](crate::tensor::Tape::bce_class) and
//! [`Tape::bce_attention`](crate::tensor::Tape::bce_attention) compute the
//! same quantities with gradients.

use crate::supervision::AttentionMask;
use crate::tensor::bce_elem;
use thiserror::Error;

pub const DEFAULT_BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("attention mask shape mismatch: {0}×{1} vs {2}×{3}")]
    MaskShape(usize, usize, usize, usize),
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
}

/// Mean clamped binary cross-entropy of probabilities against `{0,1}` labels.
pub fn bce_class(predictions: &[f64], labels: &[u8], epsilon: f64) -> Result<f64, LossError> {
    if predictions.is_empty() {
        return Err(LossError::Empty("bce_class"));
    }
    if predictions.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            what: "bce_class",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_elem(p, y as f64, epsilon))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Mean per-cell clamped cross-entropy between predicted masks and the
/// pseudo-ground truth, over the samples that have one. Zero if none do.
pub fn bce_attention(
    predicted: &[AttentionMask],
    ground_truth: &[Option<AttentionMask>],
    epsilon: f64,
) -> Result<f64, LossError> {
    if predicted.len() != ground_truth.len() {
        return Err(LossError::LengthMismatch {
            what: "bce_attention",
            left: predicted.len(),
            right: ground_truth.len(),
        });
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for (p, gt) in predicted.iter().zip(ground_truth) {
        let Some(gt) = gt else { continue };
        if (p.height, p.width) != (gt.height, gt.width) {
            return Err(LossError::MaskShape(p.height, p.width, gt.height, gt.width));
        }
        total += p
            .values
            .iter()
            .zip(&gt.values)
            .map(|(&a, &y)| bce_elem(a as f64, y as f64, epsilon))
            .sum::<f64>();
        cells += gt.values.len();
    }
    Ok(if cells == 0 { 0.0 } else { total / cells as f64 })
}

/// `λ·l_class + (1−λ)·l_attention`.
pub fn joint_loss(l_class: f64, l_attention: f64, lambda: f64) -> Result<f64, LossError> {
    check_lambda(lambda)?;
    Ok(lambda * l_class + (1.0 - lambda) * l_attention)
}

pub fn check_lambda(lambda: f64) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(LossError::Lambda(lambda))
    }
}
