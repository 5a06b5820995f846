//! Pseudo labeling and Reliable Pseudo Labeling (RPL).
//!
//! RPL buckets unlabeled predictions by predicted class, ranks each bucket
//! by confidence and, in round `t` of `T`, adds the top `⌊t/T · |bucket|⌋`
//! of every bucket to the labelled set before retraining from scratch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{OrdinalLabel, TabularDataset, TabularSample, NUM_GRADES};
use crate::ensemble::{train_deep_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::learners::{ModelSpec, Prediction, Predictor, TrainConfig};

pub const DEFAULT_ROUNDS: usize = 5;

/// Largest class probability.
pub fn confidence_classifier(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Negative distance to the nearest integer, so larger is more confident.
pub fn confidence_regressor(raw: f64) -> f64 {
    -(raw.round() - raw).abs()
}

pub fn confidence(pred: &Prediction) -> f64 {
    match pred {
        Prediction::Probs(p) => confidence_classifier(p),
        Prediction::Scalar(v) => confidence_regressor(*v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub id: u64,
    pub label: OrdinalLabel,
    pub confidence: f64,
}

/// Unlabeled samples grouped by predicted class, most confident first,
/// ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoBuckets {
    buckets: [Vec<PseudoEntry>; NUM_GRADES],
}

impl PseudoBuckets {
    pub fn from_entries(entries: impl IntoIterator<Item = PseudoEntry>) -> Self {
        let mut b = Self::default();
        for e in entries {
            b.buckets[e.label.index()].push(e);
        }
        for bucket in &mut b.buckets {
            bucket.sort_by(|x, y| y.confidence.total_cmp(&x.confidence).then(x.id.cmp(&y.id)));
        }
        b
    }

    pub fn bucket(&self, class: usize) -> &[PseudoEntry] {
        &self.buckets[class]
    }

    pub fn sizes(&self) -> [usize; NUM_GRADES] {
        std::array::from_fn(|k| self.buckets[k].len())
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    /// The reliable prefix of every bucket for round `t` of `rounds`.
    pub fn select(&self, t: usize, rounds: usize) -> Result<[&[PseudoEntry]; NUM_GRADES]> {
        if rounds == 0 || t == 0 || t > rounds {
            return Err(Error::InputDomain(format!("round {t} outside 1..={rounds}")));
        }
        Ok(std::array::from_fn(|k| {
            let n = self.buckets[k].len();
            &self.buckets[k][..t * n / rounds]
        }))
    }
}

/// Predict every sample of `unlabeled` (its labels, if any, are ignored).
pub fn pseudo_label(model: &impl Predictor, unlabeled: &TabularDataset) -> Result<PseudoBuckets> {
    if unlabeled.dim() != model.input_dim() && !unlabeled.is_empty() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: unlabeled.dim() });
    }
    let entries = unlabeled
        .samples()
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.features)?;
            Ok(PseudoEntry { id: s.id, label: pred.decision(), confidence: confidence(&pred) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoBuckets::from_entries(entries))
}

/// Materialise the round-`t` selection as a labelled dataset.
pub fn select_reliable(buckets: &PseudoBuckets, unlabeled: &TabularDataset, t: usize, rounds: usize) -> Result<TabularDataset> {
    let chosen = buckets.select(t, rounds)?;
    let by_id: std::collections::HashMap<u64, &TabularSample> = unlabeled.samples().iter().map(|s| (s.id, s)).collect();
    let mut samples = Vec::new();
    for entry in chosen.iter().flat_map(|b| b.iter()) {
        let s = by_id.get(&entry.id).ok_or_else(|| Error::InputDomain(format!("pseudo label for unknown id {}", entry.id)))?;
        samples.push(TabularSample { id: s.id, features: s.features.clone(), label: Some(entry.label) });
    }
    TabularDataset::new(unlabeled.task(), unlabeled.dim(), samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RplConfig {
    pub rounds: usize,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Models trained per round; 1 gives a single network.
    pub members: usize,
}

impl RplConfig {
    pub fn new(spec: ModelSpec, train: TrainConfig) -> Self {
        Self { rounds: DEFAULT_ROUNDS, spec, train, members: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub round: usize,
    pub class: usize,
    pub bucket_size: usize,
    pub selected: usize,
    pub min_conf_selected: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RplOutcome {
    pub model: Ensemble,
    pub audit: Vec<AuditRow>,
}

/// Labelled-only model, trained exactly as round 0 of [`rpl_train`].
pub fn supervised_train(labeled: &TabularDataset, cfg: &RplConfig) -> Result<Ensemble> {
    train_deep_ensemble(labeled, &cfg.spec, &cfg.train, cfg.members, cfg.train.seed)
}

pub fn rpl_train(labeled: &TabularDataset, unlabeled: &TabularDataset, cfg: &RplConfig) -> Result<RplOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::InputDomain("RPL needs at least one round".into()));
    }
    if labeled.samples().iter().all(|s| s.label.is_none()) {
        return Err(Error::Empty("labelled samples"));
    }
    let wrap = |round: usize| move |e: Error| Error::RoundFailed { round, source: Box::new(e) };
    let mut model = supervised_train(labeled, cfg).map_err(wrap(0))?;
    let mut audit = Vec::with_capacity(cfg.rounds * NUM_GRADES);
    for t in 1..=cfg.rounds {
        let buckets = pseudo_label(&model, unlabeled).map_err(wrap(t))?;
        let chosen = buckets.select(t, cfg.rounds)?;
        for (class, sel) in chosen.iter().enumerate() {
            audit.push(AuditRow {
                round: t,
                class,
                bucket_size: buckets.bucket(class).len(),
                selected: sel.len(),
                min_conf_selected: sel.last().map(|e| e.confidence),
            });
        }
        let pseudo = select_reliable(&buckets, unlabeled, t, cfg.rounds)?;
        let data = labeled.concat(&pseudo).map_err(wrap(t))?;
        model = train_deep_ensemble(&data, &cfg.spec, &cfg.train, cfg.members, cfg.train.seed).map_err(wrap(t))?;
    }
    Ok(RplOutcome { model, audit })
}

/// One round that keeps every pseudo label.
pub fn naive_pl_train(labeled: &TabularDataset, unlabeled: &TabularDataset, cfg: &RplConfig) -> Result<RplOutcome> {
    rpl_train(labeled, unlabeled, &RplConfig { rounds: 1, ..cfg.clone() })
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("round,class,bucket_size,selected,min_conf_selected\n");
    for r in rows {
        let conf = r.min_conf_selected.map(|c| format!("{c:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.round, r.class, r.bucket_size, r.selected, conf));
    }
    out
}
