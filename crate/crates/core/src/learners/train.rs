use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::SegFeatures;
use super::losses::{cross_entropy, seg_total_loss, sigmoid, smooth_l1, AuxLoss};
use super::mlp::{Dense, Gradients, Head, Mlp};
use crate::augment::{augment, AugPipeline};
use crate::data::{MaskSet, Raster, SegDataset, SoftMaskSet, TabularDataset, NUM_LESIONS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Auxiliary segmentation loss added to the weighted dice.
    pub aux: AuxLoss,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            epochs: 100,
            aux: AuxLoss::Focal,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InputDomain(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InputDomain(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InputDomain("batch size must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InputDomain(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// AdamW with decoupled weight decay and a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, step: 0, m: vec![0.0; params], v: vec![0.0; params] }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in model.params_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p = *p * decay - self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

fn check_finite(model: &Mlp, loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || model.params().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { epoch, loss });
    }
    Ok(())
}

/// Loss and logit gradient for one labelled feature vector.
fn tabular_sample(model: &Mlp, x: &[f64], target: u8, rng: Option<&mut SeededRng>, grads: &mut Gradients, scale: f64) -> Result<f64> {
    let (z, trace) = model.forward_trace(x, rng)?;
    let (loss, mut dz) = match model.head() {
        Head::Softmax => cross_entropy(&z, usize::from(target)),
        Head::Scalar => {
            let (l, d) = smooth_l1(z[0], f64::from(target));
            (l, vec![d])
        }
        Head::PixelSigmoid => return Err(Error::InputDomain("segmenter head cannot fit tabular data".into())),
    };
    dz.iter_mut().for_each(|d| *d *= scale);
    model.backward(&trace, &dz, grads);
    Ok(loss)
}

/// Mean loss over `rows` at the current parameters, dropout off.
pub fn tabular_loss(model: &Mlp, data: &TabularDataset) -> Result<f64> {
    let rows: Vec<_> = data.samples().iter().filter_map(|s| s.label.map(|l| (&s.features, l.value()))).collect();
    if rows.is_empty() {
        return Err(Error::Empty("labelled samples"));
    }
    let mut scratch = model.zero_gradients();
    let mut total = 0.0;
    for (x, y) in &rows {
        total += tabular_sample(model, x, *y, None, &mut scratch, 0.0)?;
    }
    Ok(total / rows.len() as f64)
}

/// Fit a classifier or regressor on the labelled rows of `data`.
pub fn train_tabular(model: &mut Mlp, data: &TabularDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.head() == Head::PixelSigmoid {
        return Err(Error::InputDomain("segmenter head cannot fit tabular data".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: data.dim() });
    }
    let rows: Vec<_> = data.samples().iter().filter_map(|s| s.label.map(|l| (&s.features, l.value()))).collect();
    if rows.is_empty() {
        return Err(Error::Empty("labelled samples"));
    }
    let mut rng = seeded(derive_seed(cfg.seed, stream::TRAIN));
    let mut opt = AdamW::new(model.param_count(), cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_gradients();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = rows[i];
                epoch_loss += tabular_sample(model, x, y, Some(&mut rng), &mut grads, scale)?;
            }
            opt.step(model, &grads);
        }
        let mean = epoch_loss / rows.len() as f64;
        check_finite(model, mean, epoch)?;
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Segmentation loss of one image and accumulation of its parameter gradient.
fn seg_sample(model: &Mlp, feats: &SegFeatures, y: &MaskSet, cfg: &TrainConfig, rng: &mut SeededRng, grads: &mut Gradients, scale: f64) -> Result<f64> {
    if let Some(layer) = model.linear() {
        return seg_sample_linear(layer, feats, y, cfg, grads, scale);
    }
    let (w, h) = (feats.width(), feats.height());
    let mut traces = Vec::with_capacity(w * h);
    let mut probs: [Vec<f64>; NUM_LESIONS] = std::array::from_fn(|_| Vec::with_capacity(w * h));
    for f in feats.pixels() {
        let (z, trace) = model.forward_trace(f, Some(&mut *rng))?;
        for (c, p) in probs.iter_mut().enumerate() {
            p.push(sigmoid(z[c]));
        }
        traces.push(trace);
    }
    let soft = SoftMaskSet::new(probs.clone().map(|p| Raster::new(w, h, p).expect("shape matches")))?;
    let loss = seg_total_loss(y, &soft, cfg.aux, cfg.alpha)?;
    let mut dz = [0.0; NUM_LESIONS];
    for (i, trace) in traces.iter().enumerate() {
        for c in 0..NUM_LESIONS {
            let p = probs[c][i];
            dz[c] = loss.grad[c][i] * p * (1.0 - p) * scale;
        }
        model.backward(trace, &dz, grads);
    }
    Ok(loss.value)
}

/// [`seg_sample`] for a model with no hidden layer: no dropout, no trace.
fn seg_sample_linear(layer: &Dense, feats: &SegFeatures, y: &MaskSet, cfg: &TrainConfig, grads: &mut Gradients, scale: f64) -> Result<f64> {
    let (w, h) = (feats.width(), feats.height());
    let mut probs: [Vec<f64>; NUM_LESIONS] = std::array::from_fn(|_| Vec::with_capacity(w * h));
    for f in feats.pixels() {
        for (c, p) in probs.iter_mut().enumerate() {
            p.push(sigmoid(layer.output(c, f)));
        }
    }
    let soft = SoftMaskSet::new(probs.clone().map(|p| Raster::new(w, h, p).expect("shape matches")))?;
    let loss = seg_total_loss(y, &soft, cfg.aux, cfg.alpha)?;
    let mut dz = [0.0; NUM_LESIONS];
    for (i, f) in feats.pixels().enumerate() {
        for c in 0..NUM_LESIONS {
            let p = probs[c][i];
            dz[c] = loss.grad[c][i] * p * (1.0 - p) * scale;
        }
        grads.accumulate_linear(&dz, f);
    }
    Ok(loss.value)
}

/// Fit a per-pixel segmenter on the annotated samples of `data`.
pub fn train_segmenter(model: &mut Mlp, data: &SegDataset, cfg: &TrainConfig, aug: Option<&AugPipeline>) -> Result<TrainReport> {
    cfg.validate()?;
    if model.head() != Head::PixelSigmoid {
        return Err(Error::InputDomain("segmentation needs a per-pixel head".into()));
    }
    let samples: Vec<_> = data.samples().iter().filter_map(|s| s.mask.as_ref().map(|m| (&s.image, m))).collect();
    if samples.is_empty() {
        return Err(Error::Empty("annotated images"));
    }
    let cached: Vec<SegFeatures> = match aug {
        Some(_) => Vec::new(),
        None => samples.iter().map(|(img, _)| SegFeatures::compute(img)).collect(),
    };
    let mut rng = seeded(derive_seed(cfg.seed, stream::TRAIN));
    let mut aug_rng = seeded(derive_seed(cfg.seed, stream::AUGMENT));
    let mut opt = AdamW::new(model.param_count(), cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_gradients();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (img, mask) = samples[i];
                epoch_loss += match aug {
                    Some(p) => {
                        let (img, mask) = augment(img, Some(mask), p, &mut aug_rng)?;
                        let mask = mask.expect("mask passed through");
                        seg_sample(model, &SegFeatures::compute(&img), &mask, cfg, &mut rng, &mut grads, scale)?
                    }
                    None => seg_sample(model, &cached[i], mask, cfg, &mut rng, &mut grads, scale)?,
                };
            }
            opt.step(model, &grads);
        }
        let mean = epoch_loss / samples.len() as f64;
        check_finite(model, mean, epoch)?;
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
