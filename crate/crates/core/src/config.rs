//! Run configuration: a TOML file with one section per pipeline stage.
//! Parsing is strict; an unknown key anywhere is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{build_pipeline, AugPipeline};
use crate::data::Task;
use crate::ensemble::{DEFAULT_MEMBERS, MPA_SCALES};
use crate::error::{Error, Result};
use crate::learners::{AuxLoss, Head, ModelSpec, TrainConfig};
use crate::postprocess::{GradeDecisionRule, NP_DILATION_KERNEL};
use crate::ssl::{RplConfig, DEFAULT_ROUNDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rpl: RplSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub tta: TtaSection,
    #[serde(default)]
    pub post: PostSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub companion: CompanionSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Input files. Tabular tasks read CSVs, segmentation reads PGM directories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Directory of `<id>.pgm` segmentation-modality images paired with dev rows.
    pub companions: Option<PathBuf>,
    /// Output of `predict`, consumed by `evaluate`.
    pub predictions: Option<PathBuf>,
}

/// Sizes and generator knobs used when no data files are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub labeled: usize,
    pub dev: usize,
    pub noise: f64,
    pub axial_ratio: f64,
    pub dim: usize,
    pub size: usize,
    pub seg_train: usize,
    pub seg_dev: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 960,
            labeled: 60,
            dev: 300,
            noise: 7.0,
            axial_ratio: 0.04,
            dim: 8,
            size: 64,
            seg_train: 40,
            seg_dev: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regressor,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub head: HeadKind,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Trained model directory read by `predict`.
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { head: HeadKind::Regressor, hidden: vec![32], dropout: 0.2, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    /// Auxiliary loss of the NP segmenter.
    pub np_aux: AuxLoss,
    /// Auxiliary loss of the IRMA/NV segmenter.
    pub small_aux: AuxLoss,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            alpha: t.alpha,
            np_aux: AuxLoss::Focal,
            small_aux: AuxLoss::Bce,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, aux: AuxLoss, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            aux,
            alpha: self.alpha,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RplSection {
    pub rounds: usize,
}

impl Default for RplSection {
    fn default() -> Self {
        Self { rounds: DEFAULT_ROUNDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub enabled: bool,
    pub members: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { enabled: true, members: DEFAULT_MEMBERS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtaMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "flip")]
    Flip,
    #[serde(rename = "rotate")]
    Rotate,
    #[serde(rename = "rotate+mpa")]
    RotateMpa,
}

impl std::fmt::Display for TtaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TtaMode::None => "none",
            TtaMode::Flip => "flip",
            TtaMode::Rotate => "rotate",
            TtaMode::RotateMpa => "rotate+mpa",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaSection {
    /// Unset picks flip for tabular tasks and rotation for segmentation.
    pub mode: Option<TtaMode>,
    pub mpa_scales: Vec<f64>,
}

impl Default for TtaSection {
    fn default() -> Self {
        Self { mode: None, mpa_scales: MPA_SCALES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostSection {
    pub enabled: bool,
    pub threshold: f64,
    pub np_kernel: usize,
    pub nv_trigger: usize,
    pub quality_low: f64,
    pub quality_high: f64,
    /// Segmentation models used for grade post-editing in `predict`.
    pub seg_model: Option<PathBuf>,
}

impl Default for PostSection {
    fn default() -> Self {
        let rule = GradeDecisionRule::default();
        Self {
            enabled: true,
            threshold: 0.5,
            np_kernel: NP_DILATION_KERNEL,
            nv_trigger: 1,
            quality_low: rule.low(),
            quality_high: rule.high(),
            seg_model: None,
        }
    }
}

/// Training-time augmentation of segmentation images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub rotate_limit: Option<f64>,
    /// One probability per geometric operator, in pipeline order.
    pub geometric_probabilities: Option<Vec<f64>>,
}

/// Segmenter trained alongside a grading run to post-edit its grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompanionSection {
    pub train_images: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for CompanionSection {
    fn default() -> Self {
        Self { train_images: 40, lr: 0.2, epochs: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            seed: None,
            seeds: None,
            data: DataSection::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            rpl: RplSection::default(),
            ensemble: EnsembleSection::default(),
            tta: TtaSection::default(),
            post: PostSection::default(),
            augment: AugmentSection::default(),
            companion: CompanionSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.labeled == 0 || s.dev == 0 || s.labeled + s.dev >= s.n {
            return Err(config_err(format!("synth: need 0 < labeled + dev < n, got {} + {} vs {}", s.labeled, s.dev, s.n)));
        }
        if s.seg_train == 0 || s.seg_dev == 0 {
            return Err(config_err("synth: seg_train and seg_dev must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(config_err(format!("model.dropout {} outside [0,1)", self.model.dropout)));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden layer widths must be positive"));
        }
        self.train.to_train_config(AuxLoss::Focal, 0).validate().map_err(|e| config_err(format!("train: {e}")))?;
        if self.rpl.rounds == 0 {
            return Err(config_err("rpl.rounds must be at least 1"));
        }
        if self.ensemble.members == 0 {
            return Err(config_err("ensemble.members must be at least 1"));
        }
        let mode = self.tta_mode();
        match (self.task, mode) {
            (_, TtaMode::None) => {}
            (Task::Segmentation, TtaMode::Rotate | TtaMode::RotateMpa) => {}
            (Task::Quality | Task::Grading, TtaMode::Flip) => {}
            (task, mode) => return Err(config_err(format!("tta.mode {mode} does not apply to task {task}"))),
        }
        if self.tta.mpa_scales.is_empty() || self.tta.mpa_scales.iter().any(|&v| !(v >= 1.0 && v.is_finite())) {
            return Err(config_err("tta.mpa_scales must be a non-empty list of values >= 1"));
        }
        let p = &self.post;
        if !(0.0..=1.0).contains(&p.threshold) {
            return Err(config_err(format!("post.threshold {} outside [0,1]", p.threshold)));
        }
        if p.np_kernel % 2 == 0 {
            return Err(config_err(format!("post.np_kernel must be odd, got {}", p.np_kernel)));
        }
        self.grade_rule().map_err(|e| config_err(format!("post: {e}")))?;
        if self.augment.enabled && self.task != Task::Segmentation {
            return Err(config_err("augment applies to segmentation images only"));
        }
        self.augmentation()?;
        if self.companion.train_images < 2 || !(self.companion.lr > 0.0) {
            return Err(config_err("companion: need train_images >= 2 and lr > 0"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(config_err("seeds must not be empty"));
            }
        }
        Ok(())
    }

    pub fn tta_mode(&self) -> TtaMode {
        self.tta.mode.unwrap_or(match self.task {
            Task::Segmentation => TtaMode::Rotate,
            Task::Quality | Task::Grading => TtaMode::Flip,
        })
    }

    pub fn grade_rule(&self) -> Result<GradeDecisionRule> {
        GradeDecisionRule::new(self.post.quality_low, self.post.quality_high)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let head = match self.model.head {
            HeadKind::Regressor => Head::Scalar,
            HeadKind::Classifier => Head::Softmax,
        };
        ModelSpec { hidden: self.model.hidden.clone(), head, dropout: self.model.dropout }
    }

    /// Members per trained model when the ensemble stage is on, else one.
    pub fn members(&self) -> usize {
        if self.ensemble.enabled {
            self.ensemble.members
        } else {
            1
        }
    }

    pub fn rpl_config(&self, seed: u64) -> RplConfig {
        RplConfig {
            rounds: self.rpl.rounds,
            spec: self.model_spec(),
            train: self.train.to_train_config(AuxLoss::Focal, seed),
            members: self.members(),
        }
    }

    pub fn augmentation(&self) -> Result<Option<AugPipeline>> {
        if !self.augment.enabled {
            return Ok(None);
        }
        let mut p = build_pipeline(self.task);
        if let Some(limit) = self.augment.rotate_limit {
            p = p.with_rotate_limit(limit).map_err(|e| config_err(format!("augment: {e}")))?;
        }
        if let Some(probs) = &self.augment.geometric_probabilities {
            p = p.with_geometric_probabilities(probs).map_err(|e| config_err(format!("augment: {e}")))?;
        }
        Ok(Some(p))
    }

    /// Seed from the command line, else from the file. There is no clock default.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed).ok_or_else(|| config_err("a seed is required (--seed or `seed` in the config)"))
    }

    pub fn resolve_seeds(&self, cli: Option<Vec<u64>>) -> Result<Vec<u64>> {
        let seeds = cli.or_else(|| self.seeds.clone()).or_else(|| self.seed.map(|s| vec![s]));
        match seeds {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(config_err("a seed list is required (--seeds or `seeds` in the config)")),
        }
    }

    /// First 16 hex digits of the SHA-256 of every semantic field. Seeds and
    /// the output directory are left out: they are reported on their own.
    pub fn digest(&self) -> String {
        let mut semantic = self.clone();
        semantic.seed = None;
        semantic.seeds = None;
        semantic.output = OutputSection::default();
        let json = serde_json::to_string(&semantic).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hex::encode(hash)[..16].to_string()
    }
}
