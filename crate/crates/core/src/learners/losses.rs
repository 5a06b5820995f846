//! Segmentation and regression losses with analytic gradients.
//!
//! Mask losses return the gradient with respect to the soft prediction, one
//! buffer per channel in `Lesion` order.

use serde::{Deserialize, Serialize};

use crate::data::{MaskSet, SoftMaskSet, NUM_LESIONS};
use crate::error::{Error, Result};

/// Smoothing added to the dice denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Transition point of the smooth L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub value: f64,
    pub grad: [Vec<f64>; NUM_LESIONS],
}

impl MaskLoss {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    fn add_scaled(&mut self, other: &MaskLoss, scale: f64) {
        self.value += scale * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            for (a, b) in g.iter_mut().zip(o) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxLoss {
    Focal,
    Bce,
}

fn check_shapes(y: &MaskSet, yhat: &SoftMaskSet) -> Result<()> {
    if (y.width(), y.height()) != (yhat.width(), yhat.height()) {
        return Err(Error::DimensionMismatch {
            expected: y.width() * y.height(),
            got: yhat.width() * yhat.height(),
        });
    }
    Ok(())
}

/// `ln(N_pix / (count_c + 1))` per channel.
pub fn class_weights(y: &MaskSet) -> [f64; NUM_LESIONS] {
    let n = (y.width() * y.height()) as f64;
    std::array::from_fn(|c| (n / (y.channels()[c].as_slice().iter().filter(|&&v| v == 1).count() as f64 + 1.0)).ln())
}

/// Weighted dice with the weights derived from `y`.
pub fn weighted_dice_loss(y: &MaskSet, yhat: &SoftMaskSet) -> Result<MaskLoss> {
    weighted_dice_loss_with(y, yhat, class_weights(y))
}

/// `1 - 2 Σ_c w_c Σ_i y ŷ / (Σ_c w_c Σ_i (y + ŷ) + ε)`. Weights are treated as
/// constants. A zero denominator (nothing predicted, nothing present) gives 0.
pub fn weighted_dice_loss_with(y: &MaskSet, yhat: &SoftMaskSet, weights: [f64; NUM_LESIONS]) -> Result<MaskLoss> {
    check_shapes(y, yhat)?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let n = y.width() * y.height();
    let (mut inter, mut total) = (0.0, 0.0);
    for c in 0..NUM_LESIONS {
        let (yc, pc) = (y.channels()[c].as_slice(), yhat.channels()[c].as_slice());
        let (i, t) = yc.iter().zip(pc).fold((0.0, 0.0), |(i, t), (&a, &p)| {
            let a = f64::from(a);
            (i + a * p, t + a + p)
        });
        inter += weights[c] * i;
        total += weights[c] * t;
    }
    let mut out = MaskLoss::zero(n);
    if total == 0.0 {
        return Ok(out);
    }
    let den = total + DICE_EPS;
    out.value = 1.0 - 2.0 * inter / den;
    for c in 0..NUM_LESIONS {
        let yc = y.channels()[c].as_slice();
        for (g, &a) in out.grad[c].iter_mut().zip(yc) {
            *g = -2.0 * weights[c] * (f64::from(a) * den - inter) / (den * den);
        }
    }
    Ok(out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Pointwise loss and its derivative in `p`; the derivative is zero where
/// the input was clamped.
fn pixel_mean_loss(y: &MaskSet, yhat: &SoftMaskSet, f: impl Fn(bool, f64) -> (f64, f64)) -> Result<MaskLoss> {
    check_shapes(y, yhat)?;
    let n = y.width() * y.height();
    let scale = 1.0 / (n * NUM_LESIONS) as f64;
    let mut out = MaskLoss::zero(n);
    for c in 0..NUM_LESIONS {
        let (yc, pc) = (y.channels()[c].as_slice(), yhat.channels()[c].as_slice());
        for i in 0..n {
            let q = clamp_prob(pc[i]);
            let (v, d) = f(yc[i] == 1, q);
            out.value += v * scale;
            if q == pc[i] {
                out.grad[c][i] = d * scale;
            }
        }
    }
    Ok(out)
}

/// `y=1: -(1-ŷ) ln ŷ`, `y=0: -ŷ ln(1-ŷ)`, averaged over pixels and channels.
pub fn focal_loss(y: &MaskSet, yhat: &SoftMaskSet) -> Result<MaskLoss> {
    pixel_mean_loss(y, yhat, focal_pixel)
}

pub(crate) fn focal_pixel(positive: bool, p: f64) -> (f64, f64) {
    if positive {
        (-(1.0 - p) * p.ln(), p.ln() - (1.0 - p) / p)
    } else {
        (-p * (1.0 - p).ln(), -(1.0 - p).ln() + p / (1.0 - p))
    }
}

pub fn bce_loss(y: &MaskSet, yhat: &SoftMaskSet) -> Result<MaskLoss> {
    pixel_mean_loss(y, yhat, bce_pixel)
}

pub(crate) fn bce_pixel(positive: bool, p: f64) -> (f64, f64) {
    if positive {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    }
}

/// `dice + α·aux`.
pub fn seg_total_loss(y: &MaskSet, yhat: &SoftMaskSet, aux: AuxLoss, alpha: f64) -> Result<MaskLoss> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InputDomain(format!("alpha must be non-negative, got {alpha}")));
    }
    let mut total = weighted_dice_loss(y, yhat)?;
    if alpha > 0.0 {
        let part = match aux {
            AuxLoss::Focal => focal_loss(y, yhat)?,
            AuxLoss::Bce => bce_loss(y, yhat)?,
        };
        total.add_scaled(&part, alpha);
    }
    Ok(total)
}

/// Huber-style loss on `pred - target`; returns `(loss, d loss / d pred)`.
pub fn smooth_l1(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() < SMOOTH_L1_BETA {
        (d * d / (2.0 * SMOOTH_L1_BETA), d / SMOOTH_L1_BETA)
    } else {
        (d.abs() - SMOOTH_L1_BETA / 2.0, d.signum())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy; returns `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[class].max(f64::MIN_POSITIVE).ln();
    p[class] -= 1.0;
    (loss, p)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
