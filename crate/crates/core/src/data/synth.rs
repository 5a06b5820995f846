//! Desk-scale synthetic stand-ins for the grading/quality tables and the
//! three-lesion segmentation set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Image, Lesion, MaskSet, OrdinalLabel, Raster, SegDataset, SegSample, TabularDataset, TabularSample, Task, NUM_GRADES};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream, SeededRng};

/// Normal / NPDR / PDR counts of the DR-grading training table (329, 212, 70 of 611).
pub const GRADING_PROPORTIONS: [f64; NUM_GRADES] = [329.0 / 611.0, 212.0 / 611.0, 70.0 / 611.0];

/// Poor / good / excellent counts of the image-quality training table (50, 97, 518 of 665).
pub const QUALITY_PROPORTIONS: [f64; NUM_GRADES] = [50.0 / 665.0, 97.0 / 665.0, 518.0 / 665.0];

#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalSynth {
    pub task: Task,
    pub n: usize,
    pub proportions: [f64; NUM_GRADES],
    /// Standard deviation of the Gaussian around each class centre, off the ordinal axis.
    pub noise: f64,
    /// Along-axis standard deviation as a fraction of `noise`. `1.0` is isotropic;
    /// smaller values give tight, well-separated clusters along the axis that
    /// are hard to find from few labels when `noise` is large.
    pub axial_ratio: f64,
    pub dim: usize,
    /// Distance between consecutive class centres.
    pub spacing: f64,
    pub seed: u64,
}

impl OrdinalSynth {
    pub fn grading(n: usize, seed: u64) -> Self {
        Self {
            task: Task::Grading,
            n,
            proportions: GRADING_PROPORTIONS,
            noise: 7.0,
            axial_ratio: 0.04,
            dim: 8,
            spacing: 1.0,
            seed,
        }
    }

    pub fn quality(n: usize, seed: u64) -> Self {
        Self {
            task: Task::Quality,
            proportions: QUALITY_PROPORTIONS,
            ..Self::grading(n, seed)
        }
    }

    /// Class centre `k * spacing * (1,...,1)/sqrt(dim)`: colinear, class 1 between 0 and 2.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let coord = class as f64 * self.spacing / (self.dim as f64).sqrt();
        vec![coord; self.dim]
    }
}

/// Largest-remainder apportionment of `n` items over `proportions`.
/// Ties in the fractional part go to the lower class index.
pub fn apportion(n: usize, proportions: &[f64; NUM_GRADES]) -> [usize; NUM_GRADES] {
    let quotas = proportions.map(|p| p * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..NUM_GRADES).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

pub fn gen_ordinal_dataset(cfg: &OrdinalSynth) -> Result<TabularDataset> {
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::InputDomain(format!("noise {} must be finite and >= 0", cfg.noise)));
    }
    if cfg.axial_ratio < 0.0 || !cfg.axial_ratio.is_finite() {
        return Err(Error::InputDomain(format!("axial ratio {} must be finite and >= 0", cfg.axial_ratio)));
    }
    if cfg.n < 30 {
        return Err(Error::InputDomain(format!("n = {} but at least 30 samples are required", cfg.n)));
    }
    if cfg.dim == 0 {
        return Err(Error::InputDomain("feature dimension must be positive".into()));
    }
    if cfg.proportions.iter().any(|p| *p < 0.0) || (cfg.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InputDomain(format!("proportions {:?} must be non-negative and sum to 1", cfg.proportions)));
    }
    let counts = apportion(cfg.n, &cfg.proportions);
    let mut labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c as u8, k))
        .collect();
    let mut rng = seeded(derive_seed(cfg.seed, stream::DATA));
    labels.shuffle(&mut rng);

    let centers: Vec<Vec<f64>> = (0..NUM_GRADES).map(|c| cfg.center(c)).collect();
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let z: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // shrink the component along (1,...,1)
            let along = z.iter().sum::<f64>() / cfg.dim as f64;
            let shift = (cfg.axial_ratio - 1.0) * along;
            let features = centers[label as usize]
                .iter()
                .zip(&z)
                .map(|(&c, &zi)| c + cfg.noise * (zi + shift))
                .collect();
            TabularSample {
                id: i as u64,
                features,
                label: Some(OrdinalLabel(label)),
            }
        })
        .collect();
    TabularDataset::new(cfg.task, cfg.dim, samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSynth {
    pub n: usize,
    pub size: usize,
    /// Fraction of images that carry only bright stripe artifacts and no lesion.
    pub artifact_fraction: f64,
    pub seed: u64,
}

impl SegSynth {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            size,
            artifact_fraction: 0.15,
            seed,
        }
    }
}

pub(crate) const BACKGROUND: f64 = 0.45;
pub(crate) const NP_LEVEL: f64 = 0.15;
pub(crate) const IRMA_LEVEL: f64 = 0.78;
pub(crate) const NV_LEVEL: f64 = 0.95;
/// Width of the annotated NP border that renders at background level:
/// the visible dark core is smaller than the annotation.
const NP_RIM: usize = 2;
const STRIPE_BOOST: f64 = 0.25;
const SMALL_RADIUS: (usize, usize) = (1, 3);
const NP_RADIUS: (usize, usize) = (6, 14);

/// Which lesions one synthetic image carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LesionPlan {
    pub np_blobs: usize,
    pub irma_dots: usize,
    pub nv_dots: usize,
    pub stripes: usize,
}

impl LesionPlan {
    fn random(rng: &mut SeededRng, artifact_fraction: f64) -> Self {
        if rng.random::<f64>() < artifact_fraction {
            return Self {
                np_blobs: 0,
                irma_dots: 0,
                nv_dots: 0,
                stripes: rng.random_range(1..=3),
            };
        }
        Self {
            np_blobs: rng.random_range(1..=2),
            irma_dots: if rng.random::<f64>() < 0.8 { rng.random_range(1..=3) } else { 0 },
            nv_dots: if rng.random::<f64>() < 0.35 { rng.random_range(1..=2) } else { 0 },
            stripes: 0,
        }
    }

    /// Lesion content typical of a DR grade: 0 lesion-free, 1 without NV, 2 with NV.
    pub fn for_grade(grade: OrdinalLabel, rng: &mut SeededRng) -> Self {
        match grade.value() {
            0 => Self {
                np_blobs: 0,
                irma_dots: 0,
                nv_dots: 0,
                stripes: if rng.random::<f64>() < 0.3 { 1 } else { 0 },
            },
            1 => Self {
                np_blobs: rng.random_range(0..=1),
                irma_dots: rng.random_range(1..=3),
                nv_dots: 0,
                stripes: 0,
            },
            _ => Self {
                np_blobs: 1,
                irma_dots: rng.random_range(0..=2),
                nv_dots: rng.random_range(1..=2),
                stripes: 0,
            },
        }
    }
}

pub fn gen_seg_dataset(cfg: &SegSynth) -> Result<SegDataset> {
    if cfg.size < 32 {
        return Err(Error::InputDomain(format!("image size {} below minimum 32", cfg.size)));
    }
    if !(0.0..=1.0).contains(&cfg.artifact_fraction) {
        return Err(Error::InputDomain("artifact fraction must lie in [0,1]".into()));
    }
    let mut rng = seeded(derive_seed(cfg.seed, stream::DATA));
    let samples = (0..cfg.n)
        .map(|i| {
            let plan = LesionPlan::random(&mut rng, cfg.artifact_fraction);
            let (image, mask) = render(plan, cfg.size, &mut rng)?;
            Ok(SegSample {
                id: i as u64,
                image,
                mask: Some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SegDataset::new(samples)
}

/// Render one image and its ground-truth masks following `plan`.
pub fn render(plan: LesionPlan, size: usize, rng: &mut SeededRng) -> Result<(Image, MaskSet)> {
    let mut np = Raster::filled(size, size, 0u8);
    for _ in 0..plan.np_blobs {
        let r0 = rng.random_range(NP_RADIUS.0..=NP_RADIUS.1);
        let (cx, cy) = inside_center(size, r0, rng);
        paint_disk(&mut np, cx, cy, r0);
        for _ in 0..rng.random_range(1..=2) {
            let r = rng.random_range(NP_RADIUS.0..=NP_RADIUS.1);
            let (lo, hi) = (r as i64, (size - 1 - r) as i64);
            let jx = (cx as i64 + rng.random_range(-(r0 as i64)..=r0 as i64)).clamp(lo, hi);
            let jy = (cy as i64 + rng.random_range(-(r0 as i64)..=r0 as i64)).clamp(lo, hi);
            paint_disk(&mut np, jx as usize, jy as usize, r);
        }
    }

    // Small lesions stay off NP and at least two pixels apart from each other
    // so every IRMA/NV component is a single disk.
    let mut occupied = crate::postprocess::dilate(&np, 3)?;
    let mut irma = Raster::filled(size, size, 0u8);
    let mut nv = Raster::filled(size, size, 0u8);
    for (count, target) in [(plan.irma_dots, &mut irma), (plan.nv_dots, &mut nv)] {
        for _ in 0..count {
            for _attempt in 0..64 {
                let r = rng.random_range(SMALL_RADIUS.0..=SMALL_RADIUS.1);
                let (cx, cy) = inside_center(size, r, rng);
                if disk_hits(&occupied, cx, cy, r + 2) {
                    continue;
                }
                paint_disk(target, cx, cy, r);
                paint_disk(&mut occupied, cx, cy, r);
                break;
            }
        }
    }
    let outside = np.map(|v| 1 - v);
    let np_core = crate::postprocess::dilate(&outside, 2 * NP_RIM + 1)?.map(|v| 1 - v);

    let mut stripes = Raster::filled(size, size, 0.0);
    for _ in 0..plan.stripes {
        let width = rng.random_range(2..=4);
        let start = rng.random_range(0..size - width);
        let horizontal = rng.random::<bool>();
        for a in start..start + width {
            for b in 0..size {
                let (x, y) = if horizontal { (b, a) } else { (a, b) };
                stripes.set(x, y, STRIPE_BOOST);
            }
        }
    }

    let noise = Raster::from_fn(size, size, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        0.12 * z
    })
    .box_mean(1);
    let raw = Raster::from_fn(size, size, |x, y| {
        let base = if nv.get(x, y) == 1 {
            NV_LEVEL
        } else if irma.get(x, y) == 1 {
            IRMA_LEVEL
        } else if np_core.get(x, y) == 1 {
            NP_LEVEL
        } else {
            BACKGROUND
        };
        base + noise.get(x, y) + stripes.get(x, y)
    });
    let mut channels = [Raster::filled(size, size, 0u8), Raster::filled(size, size, 0u8), Raster::filled(size, size, 0u8)];
    channels[Lesion::Irma.index()] = irma;
    channels[Lesion::Np.index()] = np;
    channels[Lesion::Nv.index()] = nv;
    Ok((Image::clamped(raw)?, MaskSet::new(channels)?))
}

fn inside_center(size: usize, r: usize, rng: &mut SeededRng) -> (usize, usize) {
    (rng.random_range(r..size - r), rng.random_range(r..size - r))
}

fn disk_offsets(r: usize) -> impl Iterator<Item = (i64, i64)> {
    let r = r as i64;
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dx, dy))).filter(move |(dx, dy)| dx * dx + dy * dy <= r * r)
}

fn paint_disk(m: &mut Raster<u8>, cx: usize, cy: usize, r: usize) {
    for (dx, dy) in disk_offsets(r) {
        let (x, y) = (cx as i64 + dx, cy as i64 + dy);
        if x >= 0 && y >= 0 && (x as usize) < m.width() && (y as usize) < m.height() {
            m.set(x as usize, y as usize, 1);
        }
    }
}

fn disk_hits(m: &Raster<u8>, cx: usize, cy: usize, r: usize) -> bool {
    disk_offsets(r).any(|(dx, dy)| {
        let (x, y) = (cx as i64 + dx, cy as i64 + dy);
        x >= 0 && y >= 0 && (x as usize) < m.width() && (y as usize) < m.height() && m.get(x as usize, y as usize) == 1
    })
}
