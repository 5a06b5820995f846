//! End-to-end task pipelines shared by the CLI and the ablation study.
//!
//! Tabular inference runs ensemble → flip TTA → decision → post rule.
//! Segmentation runs ensemble → rotation TTA (optionally with multi-scale
//! aggregation) → threshold → IRMA/NV reconcile and NP dilation.

use std::path::Path;

use rayon::prelude::*;

use crate::config::{RunConfig, TtaMode};
use crate::data::split::split_seg;
use crate::data::synth::{render, LesionPlan};
use crate::data::{
    gen_ordinal_dataset, gen_seg_dataset, split_train_dev, Image, Lesion, MaskSet, OrdinalLabel, OrdinalSynth, SegDataset,
    SegSample, SegSynth, SoftMaskSet, TabularDataset, Task,
};
use crate::ensemble::{mpa_seg, train_seg_ensemble, tta_flip_predict, tta_rotate_seg, Ensemble, MANIFEST_NAME, ROTATION_TURNS};
use crate::error::{Error, Result};
use crate::learners::{ModelSpec, Prediction, Predictor, TrainConfig};
use crate::metrics::{auc_macro_ovr, qwk, regressor_class_scores, seg_summary, ConfusionMatrix};
use crate::postprocess::{grade_postedit, postprocess_masks, quality_decision};
use crate::rng::{derive_seed, seeded, stream};
use crate::ssl::{naive_pl_train, rpl_train, supervised_train};

/// Training seed for a run seed. Members use `base + k`, so spacing bases
/// keeps the ensembles of neighbouring run seeds disjoint.
pub fn train_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1000)
}

/// Which inference stages are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub ensemble: bool,
    pub tta: bool,
    pub post: bool,
}

impl Stages {
    pub const RAW: Stages = Stages { ensemble: false, tta: false, post: false };

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { ensemble: cfg.ensemble.enabled, tta: cfg.tta_mode() != TtaMode::None, post: cfg.post.enabled }
    }
}

pub struct TabularSplits {
    pub labeled: TabularDataset,
    /// Labels removed.
    pub unlabeled: TabularDataset,
    pub dev: TabularDataset,
    /// Class counts of all generated rows.
    pub counts: [usize; crate::data::NUM_GRADES],
}

/// Generate `synth.n` rows and split them into labeled, unlabeled and dev parts (stratified).
pub fn synth_tabular(cfg: &RunConfig, seed: u64) -> Result<TabularSplits> {
    let s = &cfg.synth;
    let mut synth = match cfg.task {
        Task::Quality => OrdinalSynth::quality(s.n, seed),
        Task::Grading => OrdinalSynth::grading(s.n, seed),
        Task::Segmentation => return Err(Error::Config("tabular data requested for the segmentation task".into())),
    };
    synth.noise = s.noise;
    synth.axial_ratio = s.axial_ratio;
    synth.dim = s.dim;
    let data = gen_ordinal_dataset(&synth)?;
    let (labeled, rest) = split_train_dev(&data, s.labeled as f64 / s.n as f64, seed)?;
    let unlabeled_n = s.n - s.labeled - s.dev;
    let (unlabeled, dev) = split_train_dev(&rest, unlabeled_n as f64 / rest.len() as f64, seed)?;
    Ok(TabularSplits { labeled, unlabeled: unlabeled.unlabeled(), dev, counts: data.class_counts() })
}

/// Train/dev segmentation sets of `seg_train` and `seg_dev` images.
pub fn synth_seg(cfg: &RunConfig, seed: u64) -> Result<(SegDataset, SegDataset)> {
    let s = &cfg.synth;
    let total = s.seg_train + s.seg_dev;
    let data = gen_seg_dataset(&SegSynth::new(total, s.size, seed))?;
    split_seg(&data, s.seg_train as f64 / total as f64, seed)
}

/// The fundus image paired with tabular row `id`: lesions follow the row's grade.
pub fn companion_image(grade: OrdinalLabel, id: u64, data_seed: u64, size: usize) -> Result<(Image, MaskSet)> {
    let mut rng = seeded(derive_seed(derive_seed(data_seed, stream::COMPANION), id));
    let plan = LesionPlan::for_grade(grade, &mut rng);
    render(plan, size, &mut rng)
}

/// Training images for the companion segmenter, drawn independently of the dev rows.
pub fn companion_train_set(cfg: &RunConfig, seed: u64) -> Result<SegDataset> {
    gen_seg_dataset(&SegSynth::new(cfg.companion.train_images, cfg.synth.size, derive_seed(seed, stream::COMPANION)))
}

fn keep_channels(d: &SegDataset, keep: &[Lesion]) -> Result<SegDataset> {
    let samples = d
        .samples()
        .iter()
        .map(|s| {
            let mask = s.mask.as_ref().ok_or(Error::Empty("segmentation training masks"))?;
            let channels = std::array::from_fn(|c| {
                let ch = &mask.channels()[c];
                if keep.iter().any(|l| l.index() == c) {
                    ch.clone()
                } else {
                    ch.map(|_| 0u8)
                }
            });
            Ok(SegSample { mask: Some(MaskSet::new(channels)?), ..s.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    SegDataset::new(samples)
}

/// Two pixel segmenters: one for the large NP regions and one for the small
/// IRMA and NV dots. A shared model trained on all three channels is
/// dominated by NP, whose pixels outnumber the dots by two orders of magnitude.
#[derive(Debug, Clone)]
pub struct SegModels {
    pub np: Ensemble,
    pub small: Ensemble,
}

impl SegModels {
    pub fn train(data: &SegDataset, cfg: &RunConfig, base: &TrainConfig, members: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec::segmenter();
        let aug = cfg.augmentation()?;
        let np_cfg = TrainConfig { aux: cfg.train.np_aux, ..*base };
        let small_cfg = TrainConfig { aux: cfg.train.small_aux, ..*base };
        let np = train_seg_ensemble(&keep_channels(data, &[Lesion::Np])?, &spec, &np_cfg, aug.as_ref(), members, seed)?;
        let small = train_seg_ensemble(&keep_channels(data, &[Lesion::Irma, Lesion::Nv])?, &spec, &small_cfg, aug.as_ref(), members, seed)?;
        Ok(Self { np, small })
    }

    /// Merged soft masks; with `ensemble` off only the first member of each model is used.
    pub fn soft(&self, image: &Image, ensemble: bool) -> Result<SoftMaskSet> {
        let (np, small) = if ensemble {
            (self.np.predict_mask(image)?, self.small.predict_mask(image)?)
        } else {
            (self.np.members()[0].predict_mask(image)?, self.small.members()[0].predict_mask(image)?)
        };
        SoftMaskSet::new([
            small.channel(Lesion::Irma).clone(),
            np.channel(Lesion::Np).clone(),
            small.channel(Lesion::Nv).clone(),
        ])
    }

    pub fn predict(&self, image: &Image, stages: Stages, cfg: &RunConfig) -> Result<MaskSet> {
        let base = |im: &Image| self.soft(im, stages.ensemble);
        let soft = match (stages.tta, cfg.tta_mode()) {
            (false, _) | (true, TtaMode::None | TtaMode::Flip) => base(image)?,
            (true, TtaMode::Rotate) => tta_rotate_seg(base, image, &ROTATION_TURNS)?,
            (true, TtaMode::RotateMpa) => {
                tta_rotate_seg(|im: &Image| mpa_seg(base, im, &cfg.tta.mpa_scales), image, &ROTATION_TURNS)?
            }
        };
        let bin = soft.binarize(cfg.post.threshold);
        if stages.post {
            postprocess_masks(&soft, &bin, cfg.post.np_kernel)
        } else {
            Ok(bin)
        }
    }

    /// Writes `np/` and `small/` ensemble directories.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.np.save(&dir.join("np"))?;
        self.small.save(&dir.join("small"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            np: Ensemble::load(&dir.join("np").join(MANIFEST_NAME))?,
            small: Ensemble::load(&dir.join("small").join(MANIFEST_NAME))?,
        })
    }
}

/// Segmentation training settings from `[train]`.
pub fn seg_train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    cfg.train.to_train_config(cfg.train.np_aux, seed)
}

/// Companion segmenter settings: `[train]` with the `[companion]` overrides.
pub fn companion_train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig { lr: cfg.companion.lr, epochs: cfg.companion.epochs, ..seg_train_config(cfg, seed) }
}

/// One tabular decision together with the class scores used for AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularOutput {
    pub grade: OrdinalLabel,
    pub scores: Vec<f64>,
}

fn expected_grade(pred: &Prediction) -> f64 {
    match pred {
        Prediction::Scalar(v) => *v,
        Prediction::Probs(p) => p.iter().enumerate().map(|(k, v)| k as f64 * v).sum(),
    }
}

/// Scores consistent with a grade the post rule changed: the raw value is
/// replaced by the grade itself.
fn scores_for(pred: &Prediction, grade: OrdinalLabel) -> Vec<f64> {
    if pred.decision() == grade {
        return pred.class_scores();
    }
    let classes = pred.class_scores().len();
    match pred {
        Prediction::Scalar(_) => regressor_class_scores(grade.value() as f64, classes),
        Prediction::Probs(_) => (0..classes).map(|c| f64::from(u8::from(c == grade.index()))).collect(),
    }
}

/// `masks` are the final lesion masks of the row's companion image; grading
/// post-editing needs them, the quality rule does not.
pub fn predict_tabular(model: &Ensemble, x: &[f64], stages: Stages, cfg: &RunConfig, masks: Option<&MaskSet>) -> Result<TabularOutput> {
    let predictor: &dyn Fn(&[f64]) -> Result<Prediction> = if stages.ensemble {
        &|v| model.predict(v)
    } else {
        &|v| model.members()[0].predict(v)
    };
    let pred = if stages.tta && cfg.tta_mode() == TtaMode::Flip {
        tta_flip_predict(predictor, x)?
    } else {
        predictor(x)?
    };
    let grade = match (stages.post, cfg.task) {
        (false, _) => pred.decision(),
        (true, Task::Quality) => quality_decision(expected_grade(&pred), &cfg.grade_rule()?),
        (true, Task::Grading) => {
            let masks = masks.ok_or_else(|| Error::Config("grade post-editing needs companion masks".into()))?;
            grade_postedit(pred.decision(), masks, cfg.post.nv_trigger)
        }
        (true, Task::Segmentation) => return Err(Error::Config("tabular prediction for the segmentation task".into())),
    };
    Ok(TabularOutput { grade, scores: scores_for(&pred, grade) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularScores {
    pub qwk: f64,
    pub accuracy: f64,
    pub auc: crate::metrics::AucReport,
}

pub fn score_tabular(truth: &[OrdinalLabel], outputs: &[TabularOutput]) -> Result<TabularScores> {
    let pred: Vec<OrdinalLabel> = outputs.iter().map(|o| o.grade).collect();
    let cm = ConfusionMatrix::from_labels(truth, &pred, crate::data::NUM_GRADES)?;
    let scores: Vec<Vec<f64>> = outputs.iter().map(|o| o.scores.clone()).collect();
    Ok(TabularScores {
        qwk: qwk(&cm)?,
        accuracy: crate::metrics::accuracy(&pred, truth)?,
        auc: auc_macro_ovr(&scores, truth)?,
    })
}

fn dev_truth(dev: &TabularDataset) -> Result<Vec<OrdinalLabel>> {
    dev.samples().iter().map(|s| s.label.ok_or(Error::Empty("dev labels"))).collect()
}

/// Final companion masks for every dev row, from synthetic companion images.
pub fn companion_masks(models: &SegModels, dev: &TabularDataset, cfg: &RunConfig, seed: u64) -> Result<Vec<MaskSet>> {
    let stages = Stages { ensemble: cfg.ensemble.enabled, tta: true, post: true };
    dev.samples()
        .iter()
        .map(|s| {
            let label = s.label.ok_or(Error::Empty("dev labels"))?;
            let (image, _) = companion_image(label, s.id, seed, cfg.synth.size)?;
            models.predict(&image, stages, cfg)
        })
        .collect()
}

/// Per-seed metric values of every ablation row, plus the row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub task: Task,
    /// Row names and their stage flags, in column order of [`Ablation::flag_names`].
    pub rows: Vec<(&'static str, Vec<bool>)>,
    pub seeds: Vec<u64>,
    /// `values[seed][row][metric]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

const TABULAR_ROWS: [(&str, [bool; 5]); 6] = [
    ("baseline", [false, false, false, false, false]),
    ("+ensemble", [true, false, false, false, false]),
    ("+PL", [true, true, false, false, false]),
    ("+RPL", [true, false, true, false, false]),
    ("+TTA", [true, false, true, true, false]),
    ("+post", [true, false, true, true, true]),
];

const SEG_ROWS: [(&str, [bool; 3]); 4] = [
    ("baseline", [false, false, false]),
    ("+ensemble", [true, false, false]),
    ("+TTA", [true, true, false]),
    ("+post", [true, true, true]),
];

/// `[qwk, macro auc]` for each of the six tabular rows.
pub fn ablate_tabular_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let splits = synth_tabular(cfg, seed)?;
    let truth = dev_truth(&splits.dev)?;
    let tseed = train_seed(seed);
    let rpl_cfg = crate::ssl::RplConfig { members: cfg.ensemble.members, ..cfg.rpl_config(tseed) };
    let supervised = supervised_train(&splits.labeled, &rpl_cfg)?;
    let pl = naive_pl_train(&splits.labeled, &splits.unlabeled, &rpl_cfg)?.model;
    let rpl = rpl_train(&splits.labeled, &splits.unlabeled, &rpl_cfg)?.model;
    let masks = if cfg.task == Task::Grading {
        let base = companion_train_config(cfg, tseed);
        let models = SegModels::train(&companion_train_set(cfg, seed)?, cfg, &base, cfg.ensemble.members, tseed)?;
        Some(companion_masks(&models, &splits.dev, cfg, seed)?)
    } else {
        None
    };
    TABULAR_ROWS
        .iter()
        .map(|(_, f)| {
            let model = if f[2] {
                &rpl
            } else if f[1] {
                &pl
            } else {
                &supervised
            };
            let stages = Stages { ensemble: f[0], tta: f[3], post: f[4] };
            let outputs = splits
                .dev
                .samples()
                .iter()
                .enumerate()
                .map(|(i, s)| predict_tabular(model, &s.features, stages, cfg, masks.as_ref().map(|m| &m[i])))
                .collect::<Result<Vec<_>>>()?;
            let sc = score_tabular(&truth, &outputs)?;
            Ok(vec![sc.qwk, sc.auc.macro_auc])
        })
        .collect()
}

/// `[mean dsc, mean iou, irma dsc, np dsc, nv dsc]` for each of the four segmentation rows.
pub fn ablate_seg_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (train, dev) = synth_seg(cfg, seed)?;
    let tseed = train_seed(seed);
    let models = SegModels::train(&train, cfg, &seg_train_config(cfg, tseed), cfg.ensemble.members, tseed)?;
    let gts = dev.samples().iter().map(|s| s.mask.clone().ok_or(Error::Empty("dev masks"))).collect::<Result<Vec<_>>>()?;
    SEG_ROWS
        .iter()
        .map(|(_, f)| {
            let stages = Stages { ensemble: f[0], tta: f[1], post: f[2] };
            let preds = dev.samples().iter().map(|s| models.predict(&s.image, stages, cfg)).collect::<Result<Vec<_>>>()?;
            let s = seg_summary(&preds, &gts)?;
            Ok(vec![s.mean_dsc, s.mean_iou, s.dsc[0], s.dsc[1], s.dsc[2]])
        })
        .collect()
}

/// Run every ablation row for each seed. Seeds run in parallel; results keep seed order.
pub fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<Ablation> {
    if seeds.is_empty() {
        return Err(Error::Empty("ablation seeds"));
    }
    let run = |&seed: &u64| match cfg.task {
        Task::Segmentation => ablate_seg_seed(cfg, seed),
        Task::Quality | Task::Grading => ablate_tabular_seed(cfg, seed),
    };
    let values = seeds.par_iter().map(run).collect::<Result<Vec<_>>>()?;
    let rows = match cfg.task {
        Task::Segmentation => SEG_ROWS.iter().map(|(n, f)| (*n, f.to_vec())).collect(),
        _ => TABULAR_ROWS.iter().map(|(n, f)| (*n, f.to_vec())).collect(),
    };
    Ok(Ablation { task: cfg.task, rows, seeds: seeds.to_vec(), values })
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Ablation {
    pub fn flag_names(&self) -> &'static [&'static str] {
        match self.task {
            Task::Segmentation => &["ensemble", "tta", "post"],
            _ => &["ensemble", "pl", "rpl", "tta", "post"],
        }
    }

    /// Per-seed values of one metric for one row.
    pub fn column(&self, row: usize, metric: usize) -> Vec<f64> {
        self.values.iter().map(|per_seed| per_seed[row][metric]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,");
        out.push_str(&self.flag_names().join(","));
        // (metric index, column name, with std)
        let metrics: &[(usize, &str, bool)] = match self.task {
            Task::Segmentation => &[
                (0, "mean_dsc", true),
                (1, "mean_iou", true),
                (2, "irma_dsc", false),
                (3, "np_dsc", false),
                (4, "nv_dsc", false),
            ],
            _ => &[(0, "qwk", true), (1, "auc", true)],
        };
        for (_, name, with_std) in metrics {
            out.push_str(&format!(",{name}_mean"));
            if *with_std {
                out.push_str(&format!(",{name}_std"));
            }
        }
        out.push('\n');
        for (r, (name, flags)) in self.rows.iter().enumerate() {
            out.push_str(name);
            for f in flags {
                out.push_str(if *f { ",1" } else { ",0" });
            }
            for &(m, _, with_std) in metrics {
                let (mean, std) = mean_std(&self.column(r, m));
                out.push_str(&format!(",{mean:.6}"));
                if with_std {
                    out.push_str(&format!(",{std:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
