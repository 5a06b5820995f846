//! Images, lesion masks, ordinal labels and the two dataset flavours
//! (tabular features for grading/quality, image+mask for segmentation).

mod raster;

pub mod io;
pub mod split;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use raster::{reflect_index, Raster};
pub use split::split_train_dev;
pub use synth::{gen_ordinal_dataset, gen_seg_dataset, OrdinalSynth, SegSynth};

/// Smallest side accepted for an [`Image`].
pub const MIN_IMAGE_SIDE: usize = 8;

/// Number of ordinal grades for both the quality and DR-grading tasks.
pub const NUM_GRADES: usize = 3;

/// Number of lesion channels in a [`MaskSet`].
pub const NUM_LESIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Quality,
    Grading,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Quality => "quality",
            Task::Grading => "grading",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "quality" => Ok(Task::Quality),
            "grading" => Ok(Task::Grading),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Lesion channel index within a [`MaskSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lesion {
    Irma = 0,
    Np = 1,
    Nv = 2,
}

impl Lesion {
    pub const ALL: [Lesion; 3] = [Lesion::Irma, Lesion::Np, Lesion::Nv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Lesion::Irma => "irma",
            Lesion::Np => "np",
            Lesion::Nv => "nv",
        }
    }
}

/// Grayscale image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Raster<f64>);

impl Image {
    pub fn new(raster: Raster<f64>) -> Result<Self> {
        if raster.width() < MIN_IMAGE_SIDE || raster.height() < MIN_IMAGE_SIDE {
            return Err(Error::InputDomain(format!(
                "image is {}x{}, minimum side is {MIN_IMAGE_SIDE}",
                raster.width(),
                raster.height()
            )));
        }
        if let Some(v) = raster.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InputDomain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self(raster))
    }

    /// Clamp every value into `[0, 1]` (NaN becomes 0) and wrap.
    pub fn clamped(raster: Raster<f64>) -> Result<Self> {
        Self::new(raster.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn raster(&self) -> &Raster<f64> {
        &self.0
    }

    pub fn into_raster(self) -> Raster<f64> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }
}

/// Divide an 8-bit raster by 255.
pub fn normalize_image(raw: &Raster<i32>) -> Result<Image> {
    if let Some(v) = raw.as_slice().iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::InputDomain(format!("raw pixel {v} outside [0,255]")));
    }
    Image::new(raw.map(|v| v as f64 / 255.0))
}

/// Three binary lesion channels, indexed by [`Lesion`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    channels: [Raster<u8>; NUM_LESIONS],
}

impl MaskSet {
    pub fn new(channels: [Raster<u8>; NUM_LESIONS]) -> Result<Self> {
        let [a, b, c] = &channels;
        if !a.same_shape(b) || !a.same_shape(c) {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: if a.same_shape(b) { c.len() } else { b.len() },
            });
        }
        if channels.iter().any(|ch| ch.as_slice().iter().any(|&v| v > 1)) {
            return Err(Error::InputDomain("mask pixel is not 0 or 1".into()));
        }
        Ok(Self { channels })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| Raster::filled(width, height, 0)),
        }
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn channel(&self, lesion: Lesion) -> &Raster<u8> {
        &self.channels[lesion.index()]
    }

    pub fn channels(&self) -> &[Raster<u8>; NUM_LESIONS] {
        &self.channels
    }

    pub fn into_channels(self) -> [Raster<u8>; NUM_LESIONS] {
        self.channels
    }

    pub fn positive_count(&self, lesion: Lesion) -> usize {
        self.channel(lesion).as_slice().iter().filter(|&&v| v == 1).count()
    }

    /// Apply the same spatial transform to every channel.
    pub fn map_channels(&self, f: impl Fn(&Raster<u8>) -> Raster<u8>) -> Self {
        Self {
            channels: std::array::from_fn(|c| f(&self.channels[c])),
        }
    }

    pub fn to_soft(&self) -> SoftMaskSet {
        SoftMaskSet {
            channels: std::array::from_fn(|c| self.channels[c].map(f64::from)),
        }
    }
}

/// Per-pixel lesion probabilities, one raster per [`Lesion`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskSet {
    channels: [Raster<f64>; NUM_LESIONS],
}

impl SoftMaskSet {
    pub fn new(channels: [Raster<f64>; NUM_LESIONS]) -> Result<Self> {
        let [a, b, c] = &channels;
        if !a.same_shape(b) || !a.same_shape(c) {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: if a.same_shape(b) { c.len() } else { b.len() },
            });
        }
        if channels
            .iter()
            .any(|ch| ch.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InputDomain("soft mask value outside [0,1]".into()));
        }
        Ok(Self { channels })
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn channel(&self, lesion: Lesion) -> &Raster<f64> {
        &self.channels[lesion.index()]
    }

    pub fn channels(&self) -> &[Raster<f64>; NUM_LESIONS] {
        &self.channels
    }

    pub fn map_channels(&self, f: impl Fn(&Raster<f64>) -> Raster<f64>) -> Self {
        Self {
            channels: std::array::from_fn(|c| f(&self.channels[c])),
        }
    }

    /// `value >= threshold` becomes 1.
    pub fn binarize(&self, threshold: f64) -> MaskSet {
        MaskSet {
            channels: std::array::from_fn(|c| {
                self.channels[c].map(|v| u8::from(v >= threshold))
            }),
        }
    }

    /// Element-wise mean of equally shaped soft masks. Sums are formed by
    /// pairwise reduction in slice order, so averaging `2^k` identical masks
    /// reproduces the input bit for bit.
    pub fn average(masks: &[SoftMaskSet]) -> Result<SoftMaskSet> {
        let first = masks.first().ok_or(Error::Empty("no soft masks to average"))?;
        for m in &masks[1..] {
            if !m.channels[0].same_shape(&first.channels[0]) {
                return Err(Error::DimensionMismatch {
                    expected: first.channels[0].len(),
                    got: m.channels[0].len(),
                });
            }
        }
        let n = masks.len() as f64;
        Ok(SoftMaskSet {
            channels: std::array::from_fn(|c| {
                let parts: Vec<&Raster<f64>> = masks.iter().map(|m| &m.channels[c]).collect();
                pairwise_sum(&parts).map(|v| (v / n).clamp(0.0, 1.0))
            }),
        })
    }
}

pub(crate) fn pairwise_sum(parts: &[&Raster<f64>]) -> Raster<f64> {
    match parts {
        [one] => (*one).clone(),
        _ => {
            let (l, r) = parts.split_at(parts.len() / 2);
            let mut acc = pairwise_sum(l);
            for (a, b) in acc.as_mut_slice().iter_mut().zip(pairwise_sum(r).as_slice()) {
                *a += b;
            }
            acc
        }
    }
}

/// Ordinal grade in `{0, 1, 2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct OrdinalLabel(u8);

impl OrdinalLabel {
    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_GRADES {
            Ok(Self(value))
        } else {
            Err(Error::InputDomain(format!("ordinal label {value} not in {{0,1,2}}")))
        }
    }

    /// Clamp any integer into the label range.
    pub fn saturating(value: i64) -> Self {
        Self(value.clamp(0, NUM_GRADES as i64 - 1) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for OrdinalLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OrdinalLabel> for u8 {
    fn from(l: OrdinalLabel) -> u8 {
        l.0
    }
}

/// One row of a tabular (grading / quality) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: Option<OrdinalLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    task: Task,
    dim: usize,
    samples: Vec<TabularSample>,
}

impl TabularDataset {
    pub fn new(task: Task, dim: usize, samples: Vec<TabularSample>) -> Result<Self> {
        if task == Task::Segmentation {
            return Err(Error::InputDomain("tabular dataset cannot hold segmentation samples".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InputDomain(format!("sample {} has a non-finite feature", s.id)));
            }
            if !seen.insert(s.id) {
                return Err(Error::InputDomain(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { task, dim, samples })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[TabularSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples in `other` are appended after ours; ids must stay unique.
    pub fn concat(&self, other: &TabularDataset) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Self::new(self.task, self.dim, samples)
    }

    /// Same dataset with every label removed.
    pub fn unlabeled(&self) -> Self {
        Self {
            task: self.task,
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .map(|s| TabularSample { label: None, ..s.clone() })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<Option<OrdinalLabel>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_GRADES] {
        let mut counts = [0; NUM_GRADES];
        for l in self.samples.iter().filter_map(|s| s.label) {
            counts[l.index()] += 1;
        }
        counts
    }

    pub(crate) fn from_parts_unchecked(task: Task, dim: usize, samples: Vec<TabularSample>) -> Self {
        Self { task, dim, samples }
    }
}

/// Grid layout used to view a feature vector as a tiny image (for flip TTA).
/// Rows is the largest divisor of `dim` not exceeding its square root.
pub fn feature_grid(dim: usize) -> (usize, usize) {
    let rows = (1..=dim)
        .take_while(|r| r * r <= dim)
        .filter(|r| dim % r == 0)
        .last()
        .unwrap_or(1);
    (rows, dim / rows.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u64,
    pub image: Image,
    pub mask: Option<MaskSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    samples: Vec<SegSample>,
}

impl SegDataset {
    pub fn new(samples: Vec<SegSample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let shape = samples.first().map(|s| (s.image.width(), s.image.height()));
        for s in &samples {
            if Some((s.image.width(), s.image.height())) != shape {
                return Err(Error::InputDomain(format!("sample {} differs in image size", s.id)));
            }
            if let Some(m) = &s.mask {
                if (m.width(), m.height()) != (s.image.width(), s.image.height()) {
                    return Err(Error::DimensionMismatch {
                        expected: s.image.width() * s.image.height(),
                        got: m.width() * m.height(),
                    });
                }
            }
            if !seen.insert(s.id) {
                return Err(Error::InputDomain(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<SegSample> {
        self.samples
    }
}
