//! DSC / IoU for masks, quadratic weighted kappa, macro one-vs-rest AUC,
//! accuracy, and the report written by `evaluate`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::write_text;
use crate::data::{Lesion, MaskSet, OrdinalLabel, Raster, Task, NUM_LESIONS};
use crate::error::{Error, Result};

/// Rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimensionMismatch {
                expected: classes * classes,
                got: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn from_labels(truth: &[OrdinalLabel], pred: &[OrdinalLabel], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (t, p) in truth.iter().zip(pred) {
            cm.add(t.index(), p.index());
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let c = self.classes;
        Self {
            classes: c,
            counts: (0..c * c).map(|i| self.get(i % c, i / c)).collect(),
        }
    }
}

/// Quadratic weighted kappa: `1 - Σ w·O / Σ w·E`, `w_ij = (i-j)²/(C-1)²`,
/// `E` the outer product of the marginals divided by the total.
pub fn qwk(cm: &ConfusionMatrix) -> Result<f64> {
    let c = cm.classes();
    let total = cm.total() as f64;
    if total == 0.0 {
        return Err(Error::Empty("confusion matrix has no samples"));
    }
    if c < 2 {
        return Err(Error::UndefinedKappa);
    }
    let rows: Vec<f64> = (0..c).map(|i| (0..c).map(|j| cm.get(i, j) as f64).sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| (0..c).map(|i| cm.get(i, j) as f64).sum()).collect();
    let scale = ((c - 1) * (c - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = (i as f64 - j as f64).powi(2) / scale;
            observed += w * cm.get(i, j) as f64;
            expected += w * rows[i] * cols[j] / total;
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa);
    }
    Ok(1.0 - observed / expected)
}

fn check_shape(pred: &Raster<u8>, gt: &Raster<u8>) -> Result<()> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: pred.len(),
        })
    }
}

fn overlap_counts(pred: &Raster<u8>, gt: &Raster<u8>) -> (usize, usize, usize) {
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += usize::from(a == 1 && b == 1);
        p += usize::from(a == 1);
        g += usize::from(b == 1);
    }
    (inter, p, g)
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dsc(pred: &Raster<u8>, gt: &Raster<u8>) -> Result<f64> {
    check_shape(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; two empty masks score 1.
pub fn iou(pred: &Raster<u8>, gt: &Raster<u8>) -> Result<f64> {
    check_shape(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mean_dsc(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    let mut sum = 0.0;
    for l in Lesion::ALL {
        sum += dsc(pred.channel(l), gt.channel(l))?;
    }
    Ok(sum / NUM_LESIONS as f64)
}

pub fn mean_iou(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    let mut sum = 0.0;
    for l in Lesion::ALL {
        sum += iou(pred.channel(l), gt.channel(l))?;
    }
    Ok(sum / NUM_LESIONS as f64)
}

/// Per-lesion DSC/IoU averaged over images, and their channel means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegSummary {
    pub dsc: [f64; NUM_LESIONS],
    pub iou: [f64; NUM_LESIONS],
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

pub fn seg_summary(preds: &[MaskSet], gts: &[MaskSet]) -> Result<SegSummary> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("no masks to score"));
    }
    let n = preds.len() as f64;
    let mut d = [0.0; NUM_LESIONS];
    let mut u = [0.0; NUM_LESIONS];
    for (p, g) in preds.iter().zip(gts) {
        for l in Lesion::ALL {
            d[l.index()] += dsc(p.channel(l), g.channel(l))?;
            u[l.index()] += iou(p.channel(l), g.channel(l))?;
        }
    }
    let d = d.map(|v| v / n);
    let u = u.map(|v| v / n);
    Ok(SegSummary {
        dsc: d,
        iou: u,
        mean_dsc: d.iter().sum::<f64>() / NUM_LESIONS as f64,
        mean_iou: u.iter().sum::<f64>() / NUM_LESIONS as f64,
    })
}

/// Rank-based (Mann-Whitney) AUC with mid-ranks for ties.
/// `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` for classes skipped for lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
}

impl AucReport {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(c, _)| c).collect()
    }
}

/// Macro one-vs-rest AUC. `scores[i][c]` is sample i's score for class c.
pub fn auc_macro_ovr(scores: &[Vec<f64>], truth: &[OrdinalLabel]) -> Result<AucReport> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: scores.len(),
        });
    }
    let classes = scores.first().map_or(0, Vec::len);
    if let Some(bad) = scores.iter().find(|s| s.len() != classes) {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: bad.len(),
        });
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|t| t.index() == c).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    let evaluable: Vec<f64> = per_class.iter().flatten().copied().collect();
    if evaluable.is_empty() {
        return Err(Error::NoEvaluableClass);
    }
    Ok(AucReport {
        macro_auc: evaluable.iter().sum::<f64>() / evaluable.len() as f64,
        per_class,
    })
}

/// Class scores for a scalar regressor output: `-|f - c|`.
pub fn regressor_class_scores(raw: f64, classes: usize) -> Vec<f64> {
    (0..classes).map(|c| -(raw - c as f64).abs()).collect()
}

pub fn accuracy<T: PartialEq>(preds: &[T], truths: &[T]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score"));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub class: Option<String>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new(task: Task, seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            task,
            seed,
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, class: Option<&str>, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            class: class.map(Into::into),
            value,
        });
    }

    pub fn value(&self, metric: &str, class: Option<&str>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.class.as_deref() == class)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,class,value,seed,config_digest\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.task,
                r.metric,
                r.class.as_deref().unwrap_or(""),
                r.value,
                self.seed,
                self.config_digest
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("report.csv"), &self.to_csv())?;
        write_text(&dir.join("report.json"), &self.to_json())
    }
}
