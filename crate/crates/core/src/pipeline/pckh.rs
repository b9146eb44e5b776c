//! Head-normalized probability of correct keypoint.

use thiserror::Error;

use crate::skeleton::{KeypointFrame, NUM_JOINTS};

#[derive(Debug, Error, PartialEq)]
pub enum PckhError {
    #[error("{predicted} predicted frames vs {truth} ground-truth frames vs {scales} head scales")]
    LengthMismatch {
        predicted: usize,
        truth: usize,
        scales: usize,
    },
    #[error("head scale of person {index} is {value}; it must be positive")]
    BadHeadScale { index: usize, value: f64 },
    #[error("no persons to score")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckhScores {
    pub per_joint: [f64; NUM_JOINTS],
    pub mean: f64,
}

/// `score_i = (1/M) Σ_m 1[d_m^i / d_m^h ≤ threshold]`, where `d_m^i` is the
/// distance between predicted and true joint `i` of person `m` and `d_m^h`
/// that person's head scale.
pub fn pckh(
    predicted: &[KeypointFrame],
    truth: &[KeypointFrame],
    head_scales: &[f64],
    threshold: f64,
) -> Result<PckhScores, PckhError> {
    if predicted.len() != truth.len() || truth.len() != head_scales.len() {
        return Err(PckhError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
            scales: head_scales.len(),
        });
    }
    if truth.is_empty() {
        return Err(PckhError::Empty);
    }
    if let Some((index, &value)) = head_scales
        .iter()
        .enumerate()
        .find(|(_, h)| !(**h > 0.0 && h.is_finite()))
    {
        return Err(PckhError::BadHeadScale { index, value });
    }
    let mut hits = [0usize; NUM_JOINTS];
    for ((p, t), &h) in predicted.iter().zip(truth).zip(head_scales) {
        for (i, hit) in hits.iter_mut().enumerate() {
            if p.joints[i].distance(&t.joints[i]) / h <= threshold {
                *hit += 1;
            }
        }
    }
    let m = truth.len() as f64;
    let per_joint = hits.map(|h| h as f64 / m);
    Ok(PckhScores {
        mean: hits.iter().sum::<usize>() as f64 / (m * NUM_JOINTS as f64),
        per_joint,
    })
}
