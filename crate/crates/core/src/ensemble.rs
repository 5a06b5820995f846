//! Deep ensembles and test-time aggregation.
//!
//! All averaging happens in probability / soft-mask space and is reduced in a
//! fixed order, so results do not depend on thread scheduling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugPipeline;
use crate::data::{feature_grid, Image, Raster, SegDataset, SoftMaskSet, TabularDataset};
use crate::error::{Error, Result};
use crate::learners::{checkpoint, train_segmenter, train_tabular, Head, Mlp, ModelSpec, Prediction, Predictor, TrainConfig};
use crate::rng::{derive_seed, seeded, stream};

pub const DEFAULT_MEMBERS: usize = 5;
/// Quarter turns of the rotation TTA; 4 turns is the identity.
pub const ROTATION_TURNS: [usize; 4] = [1, 2, 3, 4];
pub const MPA_SCALES: [f64; 5] = [1.0, 1.1, 1.2, 1.3, 1.4];
pub const MANIFEST_NAME: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<Mlp>,
    seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    head: Head,
    members: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    path: String,
    seed: u64,
}

impl Ensemble {
    pub fn new(members: Vec<Mlp>, seeds: Vec<u64>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble members"))?;
        if seeds.len() != members.len() {
            return Err(Error::DimensionMismatch { expected: members.len(), got: seeds.len() });
        }
        for m in &members[1..] {
            if m.head() != first.head() || m.input_dim() != first.input_dim() {
                return Err(Error::InputDomain("ensemble members must share head and input size".into()));
            }
        }
        Ok(Self { members, seeds })
    }

    pub fn single(model: Mlp, seed: u64) -> Self {
        Self { members: vec![model], seeds: vec![seed] }
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean soft mask over members.
    pub fn predict_mask(&self, image: &Image) -> Result<SoftMaskSet> {
        let masks = self.members.iter().map(|m| m.predict_mask(image)).collect::<Result<Vec<_>>>()?;
        SoftMaskSet::average(&masks)
    }

    /// Population variance across members of each output component.
    pub fn variance(&self, x: &[f64]) -> Result<Vec<f64>> {
        let preds = self.members.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| match p {
                Prediction::Probs(v) => v.clone(),
                Prediction::Scalar(v) => vec![*v],
            })
            .collect();
        let n = rows.len() as f64;
        Ok((0..rows[0].len())
            .map(|j| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
            })
            .collect())
    }

    /// Write one checkpoint per member plus a JSON manifest; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (k, (m, &seed)) in self.members.iter().zip(&self.seeds).enumerate() {
            let name = format!("member_{k}.skl");
            checkpoint::save(m, &dir.join(&name))?;
            entries.push(ManifestEntry { path: name, seed });
        }
        let manifest = Manifest { head: self.members[0].head(), members: entries };
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    /// Load from a manifest; relative member paths resolve against its directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::new();
        let mut seeds = Vec::new();
        for entry in &manifest.members {
            let m = checkpoint::load(&base.join(&entry.path))?;
            if m.head() != manifest.head {
                return Err(Error::format("manifest", manifest_path, format!("{} has head {:?}", entry.path, m.head())));
            }
            members.push(m);
            seeds.push(entry.seed);
        }
        Self::new(members, seeds)
    }
}

impl Predictor for Ensemble {
    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        ensemble_predict(self, x)
    }

    fn head(&self) -> Head {
        self.members[0].head()
    }

    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }
}

/// Arithmetic mean of the members' outputs.
pub fn ensemble_predict(e: &Ensemble, x: &[f64]) -> Result<Prediction> {
    let preds = e.members.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    Prediction::mean(&preds)
}

fn member_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

fn train_members(k: usize, base_seed: u64, fit: impl Fn(u64) -> Result<Mlp> + Sync) -> Result<Ensemble> {
    if k == 0 {
        return Err(Error::Empty("ensemble members"));
    }
    let members = (0..k)
        .into_par_iter()
        .map(|i| fit(member_seed(base_seed, i)).map_err(|e| Error::MemberFailed { member: i, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, (0..k).map(|i| member_seed(base_seed, i)).collect())
}

/// `k` independently initialised and shuffled models; member `i` uses seed `base_seed + i`.
pub fn train_deep_ensemble(data: &TabularDataset, spec: &ModelSpec, cfg: &TrainConfig, k: usize, base_seed: u64) -> Result<Ensemble> {
    train_members(k, base_seed, |seed| {
        let mut m = Mlp::init(spec, data.dim(), &mut seeded(derive_seed(seed, stream::INIT)))?;
        train_tabular(&mut m, data, &cfg.with_seed(seed))?;
        Ok(m)
    })
}

/// Segmentation counterpart of [`train_deep_ensemble`].
pub fn train_seg_ensemble(
    data: &SegDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    aug: Option<&AugPipeline>,
    k: usize,
    base_seed: u64,
) -> Result<Ensemble> {
    train_members(k, base_seed, |seed| {
        let mut m = Mlp::init(spec, crate::learners::SEG_FEATURES, &mut seeded(derive_seed(seed, stream::INIT)))?;
        train_segmenter(&mut m, data, &cfg.with_seed(seed), aug)?;
        Ok(m)
    })
}

fn flip_features(x: &[f64], horizontal: bool) -> Vec<f64> {
    let (rows, cols) = feature_grid(x.len());
    let grid = Raster::new(cols, rows, x.to_vec()).expect("grid covers the vector");
    let flipped = if horizontal { grid.flip_horizontal() } else { grid.flip_vertical() };
    flipped.into_vec()
}

/// Mean over identity, horizontal and vertical flip of the feature grid.
pub fn tta_flip_predict(predict: impl Fn(&[f64]) -> Result<Prediction>, x: &[f64]) -> Result<Prediction> {
    let branches = [x.to_vec(), flip_features(x, true), flip_features(x, false)];
    let preds = branches.iter().map(|b| predict(b)).collect::<Result<Vec<_>>>()?;
    Prediction::mean(&preds)
}

/// Flip TTA for image-level predictors.
pub fn tta_flip_image(predict: impl Fn(&Image) -> Result<Prediction>, image: &Image) -> Result<Prediction> {
    let r = image.raster();
    let branches = [image.clone(), Image::new(r.flip_horizontal())?, Image::new(r.flip_vertical())?];
    let preds = branches.iter().map(&predict).collect::<Result<Vec<_>>>()?;
    Prediction::mean(&preds)
}

/// Rotate the input by each number of quarter turns, predict, rotate the
/// prediction back and average.
pub fn tta_rotate_seg(predict: impl Fn(&Image) -> Result<SoftMaskSet>, image: &Image, turns: &[usize]) -> Result<SoftMaskSet> {
    if image.width() != image.height() {
        return Err(Error::NonSquare { width: image.width(), height: image.height() });
    }
    if turns.is_empty() {
        return Err(Error::Empty("rotation set"));
    }
    let aligned = turns
        .iter()
        .map(|&k| {
            let rotated = Image::new(image.raster().rotate_quarter(k))?;
            let pred = predict(&rotated)?;
            Ok(pred.map_channels(|ch| ch.rotate_quarter((4 - k % 4) % 4)))
        })
        .collect::<Result<Vec<_>>>()?;
    SoftMaskSet::average(&aligned)
}

/// Whole-image multi-scale aggregation: upscale by each factor, predict,
/// resize the soft mask back and average.
pub fn mpa_seg(predict: impl Fn(&Image) -> Result<SoftMaskSet>, image: &Image, scales: &[f64]) -> Result<SoftMaskSet> {
    if scales.is_empty() {
        return Err(Error::Empty("scale set"));
    }
    let (w, h) = (image.width(), image.height());
    let outs = scales
        .iter()
        .map(|&s| {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(Error::InputDomain(format!("MPA scale {s} must be at least 1")));
            }
            let sw = (w as f64 * s).round() as usize;
            let sh = (h as f64 * s).round() as usize;
            if (sw, sh) == (w, h) {
                return predict(image);
            }
            let scaled = Image::clamped(image.raster().resize_bilinear(sw, sh))?;
            let pred = predict(&scaled)?;
            let back = pred.map_channels(|ch| ch.resize_bilinear(w, h).map(|v| v.clamp(0.0, 1.0)));
            Ok(back)
        })
        .collect::<Result<Vec<_>>>()?;
    SoftMaskSet::average(&outs)
}
