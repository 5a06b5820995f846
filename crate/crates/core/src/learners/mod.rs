//! Small differentiable models, their losses and the training loop.

pub mod checkpoint;
mod features;
pub mod losses;
mod mlp;
mod predict;
mod train;

pub use features::{SegFeatures, SEG_FEATURES, SEG_RADII};
pub use losses::AuxLoss;
pub use mlp::{Dense, Gradients, Head, Mlp, ModelSpec};
pub use predict::{Prediction, Predictor};
pub use train::{tabular_loss, train_segmenter, train_tabular, AdamW, TrainConfig, TrainReport};

use crate::data::{OrdinalLabel, NUM_GRADES};

/// Round half away from zero, clamped to the grade range.
pub fn regressor_decision(raw: f64) -> OrdinalLabel {
    if !raw.is_finite() {
        return OrdinalLabel::saturating(if raw > 0.0 { NUM_GRADES as i64 - 1 } else { 0 });
    }
    OrdinalLabel::saturating(raw.round() as i64)
}

/// Index of the largest probability; ties go to the lower class.
pub fn classifier_decision(probs: &[f64]) -> OrdinalLabel {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    OrdinalLabel::saturating(best as i64)
}
