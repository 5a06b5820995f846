//! Rule-based corrections applied after inference: NP dilation, IRMA/NV
//! conflict removal, quality thresholds and segmentation-guided grade edits.

use serde::{Deserialize, Serialize};

use crate::data::{Lesion, MaskSet, OrdinalLabel, Raster, SoftMaskSet};
use crate::error::{Error, Result};

/// Kernel size used for NP dilation.
pub const NP_DILATION_KERNEL: usize = 5;

/// Square max filter of side `k`, clipped at the borders.
pub fn dilate(mask: &Raster<u8>, k: usize) -> Result<Raster<u8>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    let r = k / 2;
    let (w, h) = (mask.width(), mask.height());
    let rows = Raster::from_fn(w, h, |x, y| {
        (x.saturating_sub(r)..(x + r + 1).min(w)).map(|xx| mask.get(xx, y)).max().unwrap_or(0)
    });
    Ok(Raster::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..(y + r + 1).min(h)).map(|yy| rows.get(x, yy)).max().unwrap_or(0)
    }))
}

/// Where IRMA and NV are both positive, keep the channel whose soft score is
/// strictly larger; equal scores keep IRMA. NP is left alone.
pub fn reconcile_irma_nv(soft: &SoftMaskSet, bin: &MaskSet) -> Result<MaskSet> {
    if (soft.width(), soft.height()) != (bin.width(), bin.height()) {
        return Err(Error::DimensionMismatch {
            expected: bin.width() * bin.height(),
            got: soft.width() * soft.height(),
        });
    }
    let [mut irma, np, mut nv] = bin.clone().into_channels();
    let (p_irma, p_nv) = (soft.channel(Lesion::Irma), soft.channel(Lesion::Nv));
    for i in 0..irma.len() {
        if irma.as_slice()[i] == 1 && nv.as_slice()[i] == 1 {
            if p_nv.as_slice()[i] > p_irma.as_slice()[i] {
                irma.as_mut_slice()[i] = 0;
            } else {
                nv.as_mut_slice()[i] = 0;
            }
        }
    }
    MaskSet::new([irma, np, nv])
}

/// Full mask post-processing: IRMA/NV reconciliation, then NP dilation.
pub fn postprocess_masks(soft: &SoftMaskSet, bin: &MaskSet, np_kernel: usize) -> Result<MaskSet> {
    let reconciled = reconcile_irma_nv(soft, bin)?;
    let [irma, np, nv] = reconciled.into_channels();
    MaskSet::new([irma, dilate(&np, np_kernel)?, nv])
}

/// Operating thresholds that replace plain rounding for the quality regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeDecisionRule {
    low: f64,
    high: f64,
}

impl Default for GradeDecisionRule {
    fn default() -> Self {
        Self { low: 0.54, high: 1.5 }
    }
}

impl GradeDecisionRule {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low < high) {
            return Err(Error::InputDomain(format!("threshold low {low} must be below high {high}")));
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }
}

/// `raw < low` → 0, `low <= raw < high` → 1, otherwise 2.
pub fn quality_decision(raw: f64, rule: &GradeDecisionRule) -> OrdinalLabel {
    let grade = if raw < rule.low {
        0
    } else if raw < rule.high {
        1
    } else {
        2
    };
    OrdinalLabel::saturating(grade)
}

/// Override a DR grade from final segmentation masks: enough NV pixels force
/// PDR (2); no positive pixel in any channel forces normal (0).
pub fn grade_postedit(grade: OrdinalLabel, masks: &MaskSet, nv_trigger: usize) -> OrdinalLabel {
    if masks.positive_count(Lesion::Nv) >= nv_trigger.max(1) {
        OrdinalLabel::saturating(2)
    } else if Lesion::ALL.iter().all(|&l| masks.positive_count(l) == 0) {
        OrdinalLabel::saturating(0)
    } else {
        grade
    }
}
