//! Two-stage augmentation sampler.
//!
//! Every call applies exactly one pixel-wise operator drawn uniformly from
//! `omega`, then one from `psi`, then walks the geometric list in declared
//! order, applying each operator with its own probability. Geometric
//! operators move image and masks together (bilinear for the image, nearest
//! neighbour for masks); pixel operators and coarse dropout only touch the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, MaskSet, Raster, Task};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PixelOp {
    /// `x * (1 + c) + b`, `b ∈ ±brightness_limit`, `c ∈ ±contrast_limit`.
    BrightnessContrast { brightness_limit: f64, contrast_limit: f64 },
    /// `x^(g / 100)` with `g` drawn from `[low, high]`.
    Gamma { low: f64, high: f64 },
    /// Unsharp blend against a 3×3 box blur.
    Sharpen { alpha: (f64, f64), lightness: (f64, f64) },
    /// Box blur, odd kernel drawn from `3..=blur_limit`.
    Blur { blur_limit: usize },
    /// Bilinear down- then up-sampling by a factor in `[scale_min, scale_max]`.
    Downscale { scale_min: f64, scale_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GeometricOp {
    /// Horizontal or vertical mirror, chosen uniformly.
    Flip,
    /// Shift as a fraction of the side, relative scale change, rotation in degrees.
    ShiftScaleRotate { shift_limit: f64, scale_limit: f64, rotate_limit: f64 },
    /// Random displacement of a `(num_steps+1)²` control grid, up to
    /// `distort_limit` cells, bilinearly interpolated to a dense warp.
    GridDistortion { num_steps: usize, distort_limit: f64 },
    /// Zero up to `max_holes` rectangles of the image.
    CoarseDropout {
        min_height: usize,
        max_height: usize,
        min_width: usize,
        max_width: usize,
        max_holes: usize,
    },
    /// Isotropic zoom about the centre.
    Affine { scale: (f64, f64) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricStep {
    pub op: GeometricOp,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPipeline {
    omega: Vec<PixelOp>,
    psi: Vec<PixelOp>,
    geometric: Vec<GeometricStep>,
}

fn check_range(lo: f64, hi: f64, what: &str) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo <= hi {
        Ok(())
    } else {
        Err(Error::InputDomain(format!("{what}: empty range [{lo}, {hi}]")))
    }
}

impl PixelOp {
    fn validate(&self) -> Result<()> {
        match *self {
            PixelOp::BrightnessContrast { brightness_limit, contrast_limit } => {
                check_range(0.0, brightness_limit, "brightness_limit")?;
                check_range(0.0, contrast_limit, "contrast_limit")
            }
            PixelOp::Gamma { low, high } => {
                check_range(low, high, "gamma_limit")?;
                if low <= 0.0 {
                    return Err(Error::InputDomain("gamma_limit must be positive".into()));
                }
                Ok(())
            }
            PixelOp::Sharpen { alpha, lightness } => {
                check_range(alpha.0, alpha.1, "alpha")?;
                check_range(lightness.0, lightness.1, "lightness")
            }
            PixelOp::Blur { blur_limit } => {
                if blur_limit < 3 {
                    return Err(Error::InputDomain("blur_limit must be at least 3".into()));
                }
                Ok(())
            }
            PixelOp::Downscale { scale_min, scale_max } => {
                check_range(scale_min, scale_max, "downscale")?;
                if scale_min <= 0.0 || scale_max > 1.0 {
                    return Err(Error::InputDomain("downscale factors must lie in (0,1]".into()));
                }
                Ok(())
            }
        }
    }

    /// Draw concrete parameters.
    pub fn sample(&self, rng: &mut SeededRng) -> PixelDraw {
        match *self {
            PixelOp::BrightnessContrast { brightness_limit, contrast_limit } => PixelDraw::BrightnessContrast {
                brightness: uniform(rng, -brightness_limit, brightness_limit),
                contrast: uniform(rng, -contrast_limit, contrast_limit),
            },
            PixelOp::Gamma { low, high } => PixelDraw::Gamma {
                gamma: uniform(rng, low, high),
            },
            PixelOp::Sharpen { alpha, lightness } => PixelDraw::Sharpen {
                alpha: uniform(rng, alpha.0, alpha.1),
                lightness: uniform(rng, lightness.0, lightness.1),
            },
            PixelOp::Blur { blur_limit } => {
                let max_half = (blur_limit - 1) / 2;
                PixelDraw::Blur {
                    kernel: 2 * rng.random_range(1..=max_half) + 1,
                }
            }
            PixelOp::Downscale { scale_min, scale_max } => PixelDraw::Downscale {
                scale: uniform(rng, scale_min, scale_max),
            },
        }
    }
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// A pixel operator with its parameters fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelDraw {
    BrightnessContrast { brightness: f64, contrast: f64 },
    Gamma { gamma: f64 },
    Sharpen { alpha: f64, lightness: f64 },
    Blur { kernel: usize },
    Downscale { scale: f64 },
}

impl PixelDraw {
    /// Output is clamped to `[0, 1]`.
    pub fn apply(&self, img: &Raster<f64>) -> Raster<f64> {
        let out = match *self {
            PixelDraw::BrightnessContrast { brightness, contrast } => img.map(|v| v * (1.0 + contrast) + brightness),
            PixelDraw::Gamma { gamma } => {
                let e = gamma / 100.0;
                img.map(|v| v.max(0.0).powf(e))
            }
            PixelDraw::Sharpen { alpha, lightness } => {
                let blur = img.box_mean(1);
                Raster::from_fn(img.width(), img.height(), |x, y| {
                    let v = img.get(x, y);
                    let sharp = v + lightness * (v - blur.get(x, y));
                    v * (1.0 - alpha) + alpha * sharp
                })
            }
            PixelDraw::Blur { kernel } => img.box_mean(kernel / 2),
            PixelDraw::Downscale { scale } => {
                let w = ((img.width() as f64 * scale).round() as usize).max(1);
                let h = ((img.height() as f64 * scale).round() as usize).max(1);
                img.resize_bilinear(w, h).resize_bilinear(img.width(), img.height())
            }
        };
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

impl GeometricOp {
    fn validate(&self) -> Result<()> {
        match *self {
            GeometricOp::Flip => Ok(()),
            GeometricOp::ShiftScaleRotate { shift_limit, scale_limit, rotate_limit } => {
                check_range(0.0, shift_limit, "shift_limit")?;
                check_range(0.0, rotate_limit, "rotate_limit")?;
                check_range(0.0, scale_limit, "scale_limit")?;
                if scale_limit >= 1.0 {
                    return Err(Error::InputDomain("scale_limit must be below 1".into()));
                }
                Ok(())
            }
            GeometricOp::GridDistortion { num_steps, distort_limit } => {
                if num_steps == 0 {
                    return Err(Error::InputDomain("num_steps must be positive".into()));
                }
                check_range(0.0, distort_limit, "distort_limit")
            }
            GeometricOp::CoarseDropout { min_height, max_height, min_width, max_width, max_holes } => {
                if min_height == 0 || min_width == 0 || min_height > max_height || min_width > max_width || max_holes == 0 {
                    return Err(Error::InputDomain("coarse dropout sizes must be non-empty ranges".into()));
                }
                Ok(())
            }
            GeometricOp::Affine { scale } => {
                check_range(scale.0, scale.1, "affine scale")?;
                if scale.0 <= 0.0 {
                    return Err(Error::InputDomain("affine scale must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, rng: &mut SeededRng, width: usize, height: usize) -> GeometricDraw {
        match *self {
            GeometricOp::Flip => GeometricDraw::Flip {
                horizontal: rng.random::<bool>(),
            },
            GeometricOp::ShiftScaleRotate { shift_limit, scale_limit, rotate_limit } => GeometricDraw::Warp(Affine2 {
                shift: (
                    uniform(rng, -shift_limit, shift_limit) * width as f64,
                    uniform(rng, -shift_limit, shift_limit) * height as f64,
                ),
                scale: 1.0 + uniform(rng, -scale_limit, scale_limit),
                angle_deg: uniform(rng, -rotate_limit, rotate_limit),
            }),
            GeometricOp::GridDistortion { num_steps, distort_limit } => {
                let n = num_steps + 1;
                let cell = (width as f64 / num_steps as f64, height as f64 / num_steps as f64);
                let mut dx = vec![0.0; n * n];
                let mut dy = vec![0.0; n * n];
                // border control points stay put so the frame is preserved
                for j in 1..n - 1 {
                    for i in 1..n - 1 {
                        dx[j * n + i] = uniform(rng, -distort_limit, distort_limit) * cell.0;
                        dy[j * n + i] = uniform(rng, -distort_limit, distort_limit) * cell.1;
                    }
                }
                GeometricDraw::Grid { steps: num_steps, dx, dy }
            }
            GeometricOp::CoarseDropout { min_height, max_height, min_width, max_width, max_holes } => {
                let count = rng.random_range(1..=max_holes);
                let holes = (0..count)
                    .map(|_| {
                        let h = rng.random_range(min_height..=max_height).min(height);
                        let w = rng.random_range(min_width..=max_width).min(width);
                        let y = rng.random_range(0..=height - h);
                        let x = rng.random_range(0..=width - w);
                        Hole { x, y, width: w, height: h }
                    })
                    .collect();
                GeometricDraw::Dropout(holes)
            }
            GeometricOp::Affine { scale } => GeometricDraw::Warp(Affine2 {
                shift: (0.0, 0.0),
                scale: uniform(rng, scale.0, scale.1),
                angle_deg: 0.0,
            }),
        }
    }
}

/// Rotation by `angle_deg` and zoom by `scale` about the image centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub shift: (f64, f64),
    pub scale: f64,
    pub angle_deg: f64,
}

impl Affine2 {
    /// Source coordinate for output pixel `(x, y)`.
    fn inverse(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let (px, py) = (x - cx - self.shift.0, y - cy - self.shift.1);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        // rotate by -angle, then undo the zoom
        let rx = (c * px + s * py) / self.scale;
        let ry = (-s * px + c * py) / self.scale;
        (rx + cx, ry + cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hole {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// A geometric operator with its parameters fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometricDraw {
    Flip { horizontal: bool },
    Warp(Affine2),
    Grid { steps: usize, dx: Vec<f64>, dy: Vec<f64> },
    Dropout(Vec<Hole>),
}

impl GeometricDraw {
    fn source(&self, x: usize, y: usize, width: usize, height: usize) -> (f64, f64) {
        match self {
            GeometricDraw::Warp(a) => a.inverse(x as f64, y as f64, width, height),
            GeometricDraw::Grid { steps, dx, dy } => {
                let n = steps + 1;
                let gx = x as f64 / (width.max(2) - 1) as f64 * *steps as f64;
                let gy = y as f64 / (height.max(2) - 1) as f64 * *steps as f64;
                let i = (gx.floor() as usize).min(steps - 1);
                let j = (gy.floor() as usize).min(steps - 1);
                let (tx, ty) = (gx - i as f64, gy - j as f64);
                let lerp = |f: &[f64]| {
                    let top = f[j * n + i] * (1.0 - tx) + f[j * n + i + 1] * tx;
                    let bottom = f[(j + 1) * n + i] * (1.0 - tx) + f[(j + 1) * n + i + 1] * tx;
                    top * (1.0 - ty) + bottom * ty
                };
                (x as f64 + lerp(dx), y as f64 + lerp(dy))
            }
            GeometricDraw::Flip { .. } | GeometricDraw::Dropout(_) => (x as f64, y as f64),
        }
    }

    pub fn apply_image(&self, img: &Raster<f64>) -> Raster<f64> {
        let (w, h) = (img.width(), img.height());
        match self {
            GeometricDraw::Flip { horizontal: true } => img.flip_horizontal(),
            GeometricDraw::Flip { horizontal: false } => img.flip_vertical(),
            GeometricDraw::Dropout(holes) => {
                let mut out = img.clone();
                for hole in holes {
                    for y in hole.y..hole.y + hole.height {
                        for x in hole.x..hole.x + hole.width {
                            out.set(x, y, 0.0);
                        }
                    }
                }
                out
            }
            _ => Raster::from_fn(w, h, |x, y| {
                let (sx, sy) = self.source(x, y, w, h);
                img.sample_bilinear(sx, sy)
            }),
        }
    }

    pub fn apply_mask(&self, mask: &Raster<u8>) -> Raster<u8> {
        let (w, h) = (mask.width(), mask.height());
        match self {
            GeometricDraw::Flip { horizontal: true } => mask.flip_horizontal(),
            GeometricDraw::Flip { horizontal: false } => mask.flip_vertical(),
            GeometricDraw::Dropout(_) => mask.clone(),
            _ => Raster::from_fn(w, h, |x, y| {
                let (sx, sy) = self.source(x, y, w, h);
                mask.sample_nearest(sx, sy)
            }),
        }
    }
}

impl AugPipeline {
    pub fn new(omega: Vec<PixelOp>, psi: Vec<PixelOp>, geometric: Vec<GeometricStep>) -> Result<Self> {
        if omega.is_empty() || psi.is_empty() {
            return Err(Error::InputDomain("both pixel-wise operator groups need at least one member".into()));
        }
        for op in omega.iter().chain(&psi) {
            op.validate()?;
        }
        for step in &geometric {
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::InputDomain(format!("probability {} outside [0,1]", step.probability)));
            }
            step.op.validate()?;
        }
        Ok(Self { omega, psi, geometric })
    }

    pub fn omega(&self) -> &[PixelOp] {
        &self.omega
    }

    pub fn psi(&self) -> &[PixelOp] {
        &self.psi
    }

    pub fn geometric(&self) -> &[GeometricStep] {
        &self.geometric
    }

    /// Replace every geometric probability (e.g. to switch geometry off).
    pub fn with_geometric_probabilities(mut self, probs: &[f64]) -> Result<Self> {
        if probs.len() != self.geometric.len() {
            return Err(Error::DimensionMismatch {
                expected: self.geometric.len(),
                got: probs.len(),
            });
        }
        for (step, &p) in self.geometric.iter_mut().zip(probs) {
            step.probability = p;
        }
        Self::new(self.omega, self.psi, self.geometric)
    }

    /// Override the rotation range of every shift-scale-rotate step.
    pub fn with_rotate_limit(mut self, limit: f64) -> Result<Self> {
        for step in &mut self.geometric {
            if let GeometricOp::ShiftScaleRotate { rotate_limit, .. } = &mut step.op {
                *rotate_limit = limit;
            }
        }
        Self::new(self.omega, self.psi, self.geometric)
    }
}

fn shared_pixel_ops() -> (Vec<PixelOp>, Vec<PixelOp>) {
    (
        vec![
            PixelOp::BrightnessContrast { brightness_limit: 0.2, contrast_limit: 0.2 },
            PixelOp::Gamma { low: 80.0, high: 120.0 },
        ],
        vec![
            PixelOp::Sharpen { alpha: (0.2, 0.5), lightness: (0.5, 1.0) },
            PixelOp::Blur { blur_limit: 3 },
            PixelOp::Downscale { scale_min: 0.7, scale_max: 0.9 },
        ],
    )
}

fn shift_scale_rotate(rotate_limit: f64) -> GeometricStep {
    GeometricStep {
        op: GeometricOp::ShiftScaleRotate { shift_limit: 0.2, scale_limit: 0.1, rotate_limit },
        probability: 0.5,
    }
}

/// Operator lists and parameters for each task's training augmentation.
pub fn build_pipeline(task: Task) -> AugPipeline {
    let (omega, psi) = shared_pixel_ops();
    let flip = GeometricStep { op: GeometricOp::Flip, probability: 0.5 };
    let geometric = match task {
        Task::Segmentation => vec![
            flip,
            shift_scale_rotate(90.0),
            GeometricStep {
                op: GeometricOp::GridDistortion { num_steps: 5, distort_limit: 0.3 },
                probability: 0.2,
            },
            GeometricStep {
                op: GeometricOp::CoarseDropout {
                    min_height: 32,
                    max_height: 128,
                    min_width: 32,
                    max_width: 128,
                    max_holes: 3,
                },
                probability: 0.2,
            },
            GeometricStep {
                op: GeometricOp::Affine { scale: (0.8, 1.2) },
                probability: 0.5,
            },
        ],
        Task::Quality => vec![flip, shift_scale_rotate(45.0)],
        Task::Grading => vec![
            flip,
            shift_scale_rotate(45.0),
            GeometricStep {
                op: GeometricOp::CoarseDropout {
                    min_height: 1,
                    max_height: 5,
                    min_width: 51,
                    max_width: 512,
                    max_holes: 5,
                },
                probability: 0.2,
            },
        ],
    };
    AugPipeline::new(omega, psi, geometric).expect("built-in pipelines are valid")
}

/// What `augment` actually did, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct AugTrace {
    pub omega: PixelDraw,
    pub psi: PixelDraw,
    pub geometric: Vec<(usize, GeometricDraw)>,
}

pub fn augment(
    image: &Image,
    mask: Option<&MaskSet>,
    pipeline: &AugPipeline,
    rng: &mut SeededRng,
) -> Result<(Image, Option<MaskSet>)> {
    augment_traced(image, mask, pipeline, rng).map(|(i, m, _)| (i, m))
}

pub fn augment_traced(
    image: &Image,
    mask: Option<&MaskSet>,
    pipeline: &AugPipeline,
    rng: &mut SeededRng,
) -> Result<(Image, Option<MaskSet>, AugTrace)> {
    if let Some(m) = mask {
        if (m.width(), m.height()) != (image.width(), image.height()) {
            return Err(Error::DimensionMismatch {
                expected: image.width() * image.height(),
                got: m.width() * m.height(),
            });
        }
    }
    let omega = pipeline.omega[rng.random_range(0..pipeline.omega.len())].sample(rng);
    let psi = pipeline.psi[rng.random_range(0..pipeline.psi.len())].sample(rng);
    let mut img = psi.apply(&omega.apply(image.raster()));
    let mut mask = mask.cloned();
    let mut applied = Vec::new();
    for (i, step) in pipeline.geometric.iter().enumerate() {
        if step.probability <= 0.0 || rng.random::<f64>() >= step.probability {
            continue;
        }
        let draw = step.op.sample(rng, img.width(), img.height());
        img = draw.apply_image(&img);
        mask = mask.map(|m| m.map_channels(|ch| draw.apply_mask(ch)));
        applied.push((i, draw));
    }
    let trace = AugTrace { omega, psi, geometric: applied };
    Ok((Image::clamped(img)?, mask, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Lesion;
    use crate::rng::seeded;

    fn test_image(size: usize) -> Image {
        Image::new(Raster::from_fn(size, size, |x, y| ((x * 7 + y * 13) % 17) as f64 / 17.0)).unwrap()
    }

    fn identity_pipeline() -> AugPipeline {
        AugPipeline::new(
            vec![PixelOp::BrightnessContrast { brightness_limit: 0.0, contrast_limit: 0.0 }],
            vec![PixelOp::Sharpen { alpha: (0.0, 0.0), lightness: (0.5, 1.0) }],
            build_pipeline(Task::Segmentation).geometric.iter().map(|s| GeometricStep { probability: 0.0, ..*s }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn table_shapes() {
        assert_eq!(build_pipeline(Task::Segmentation).geometric().len(), 5);
        assert_eq!(build_pipeline(Task::Quality).geometric().len(), 2);
        let grading = build_pipeline(Task::Grading);
        assert_eq!(grading.geometric().len(), 3);
        match grading.geometric()[2].op {
            GeometricOp::CoarseDropout { min_height, max_height, min_width, max_width, max_holes } => {
                assert_eq!((min_height, max_height, min_width, max_width, max_holes), (1, 5, 51, 512, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
        match build_pipeline(Task::Segmentation).geometric()[1].op {
            GeometricOp::ShiftScaleRotate { rotate_limit, .. } => assert_eq!(rotate_limit, 90.0),
            other => panic!("unexpected {other:?}"),
        }
        match build_pipeline(Task::Quality).geometric()[1].op {
            GeometricOp::ShiftScaleRotate { rotate_limit, .. } => assert_eq!(rotate_limit, 45.0),
            other => panic!("unexpected {other:?}"),
        }
        for task in [Task::Segmentation, Task::Quality, Task::Grading] {
            let p = build_pipeline(task);
            assert_eq!((p.omega().len(), p.psi().len()), (2, 3));
        }
    }

    #[test]
    fn identity_draws_leave_image_unchanged() {
        let img = test_image(16);
        let (out, _) = augment(&img, None, &identity_pipeline(), &mut seeded(5)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gamma_evaluation() {
        let r = Raster::filled(1, 1, 0.25);
        let out = PixelDraw::Gamma { gamma: 120.0 }.apply(&r);
        assert!((out.get(0, 0) - 0.25f64.powf(1.2)).abs() < 1e-12);
        assert!((out.get(0, 0) - 0.18946).abs() < 1e-4);
    }

    #[test]
    fn flip_moves_image_and_mask_together() {
        let img = Raster::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mask = Raster::new(2, 2, vec![1u8, 0, 0, 1]).unwrap();
        let flip = GeometricDraw::Flip { horizontal: true };
        assert_eq!(flip.apply_image(&img).as_slice(), &[0.2, 0.1, 0.4, 0.3]);
        assert_eq!(flip.apply_mask(&mask).as_slice(), &[0, 1, 1, 0]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let img = test_image(32);
        let mask = MaskSet::empty(32, 32);
        let p = build_pipeline(Task::Segmentation);
        let a = augment(&img, Some(&mask), &p, &mut seeded(9)).unwrap();
        let b = augment(&img, Some(&mask), &p, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_stay_binary_and_pixels_in_range() {
        let img = test_image(32);
        let mut ch = MaskSet::empty(32, 32).into_channels();
        for y in 10..20 {
            for x in 8..14 {
                ch[1].set(x, y, 1);
            }
        }
        let mask = MaskSet::new(ch).unwrap();
        let p = build_pipeline(Task::Segmentation).with_geometric_probabilities(&[1.0; 5]).unwrap();
        for seed in 0..20 {
            let (out, m) = augment(&img, Some(&mask), &p, &mut seeded(seed)).unwrap();
            assert!(out.raster().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            let m = m.unwrap();
            for l in Lesion::ALL {
                assert!(m.channel(l).as_slice().iter().all(|&v| v <= 1));
            }
        }
    }

    #[test]
    fn delta_image_and_mask_stay_aligned() {
        let size = 33;
        let (cx, cy) = (20, 11);
        let img = Image::new(Raster::from_fn(size, size, |x, y| f64::from(u8::from((x, y) == (cx, cy))))).unwrap();
        let mut ch = MaskSet::empty(size, size).into_channels();
        ch[0].set(cx, cy, 1);
        let mask = MaskSet::new(ch).unwrap();
        for (seed, op) in [
            GeometricOp::Flip,
            GeometricOp::ShiftScaleRotate { shift_limit: 0.1, scale_limit: 0.0, rotate_limit: 90.0 },
            GeometricOp::Affine { scale: (1.0, 1.2) },
        ]
        .into_iter()
        .enumerate()
        {
            let draw = op.sample(&mut seeded(seed as u64), size, size);
            let warped = draw.apply_image(img.raster());
            let warped_mask = draw.apply_mask(mask.channel(Lesion::Irma));
            let argmax = |s: &[f64]| s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let peak = argmax(warped.as_slice());
            let marked: Vec<usize> = warped_mask.as_slice().iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
            assert!(!marked.is_empty(), "{op:?} lost the mask pixel");
            let (px, py) = ((peak % size) as i64, (peak / size) as i64);
            let near = marked.iter().any(|&i| ((i % size) as i64 - px).abs() <= 1 && ((i / size) as i64 - py).abs() <= 1);
            assert!(near, "{op:?}: image peak {peak} vs mask {marked:?}");
        }
    }

    #[test]
    fn coarse_dropout_respects_bounds() {
        let op = GeometricOp::CoarseDropout { min_height: 2, max_height: 5, min_width: 3, max_width: 9, max_holes: 3 };
        let mut rng = seeded(1);
        for _ in 0..200 {
            match op.sample(&mut rng, 40, 30) {
                GeometricDraw::Dropout(holes) => {
                    assert!((1..=3).contains(&holes.len()));
                    for h in holes {
                        assert!((2..=5).contains(&h.height) && (3..=9).contains(&h.width));
                        assert!(h.x + h.width <= 40 && h.y + h.height <= 30);
                    }
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn oversize_dropout_is_clipped_to_the_image() {
        let op = build_pipeline(Task::Grading).geometric()[2].op;
        match op.sample(&mut seeded(3), 32, 32) {
            GeometricDraw::Dropout(holes) => assert!(holes.iter().all(|h| h.width <= 32 && h.x + h.width <= 32)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pixel_ops_never_touch_masks() {
        let img = test_image(16);
        let mut ch = MaskSet::empty(16, 16).into_channels();
        ch[2].set(3, 3, 1);
        let mask = MaskSet::new(ch).unwrap();
        let p = build_pipeline(Task::Quality).with_geometric_probabilities(&[0.0, 0.0]).unwrap();
        let (_, m) = augment(&img, Some(&mask), &p, &mut seeded(2)).unwrap();
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn invalid_pipelines_are_rejected() {
        assert!(AugPipeline::new(vec![], vec![PixelOp::Blur { blur_limit: 3 }], vec![]).is_err());
        let bad = GeometricStep { op: GeometricOp::Flip, probability: 1.5 };
        assert!(AugPipeline::new(vec![PixelOp::Blur { blur_limit: 3 }], vec![PixelOp::Blur { blur_limit: 3 }], vec![bad]).is_err());
        assert!(PixelOp::Gamma { low: 120.0, high: 80.0 }.validate().is_err());
    }
}
