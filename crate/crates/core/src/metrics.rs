//! Binary classification metrics with malignant (1) as the positive class.

use std::collections::BTreeMap;

use cbamnet_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, Model};
use crate::data::{LoadedSet, Magnification};
use crate::error::{data_err, Result};
use crate::preprocess::PreprocessConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return data_err(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (1, 0) => cm.fn_ += 1,
            _ => {
                return data_err(format!(
                    "labels and predictions must be 0 or 1, got ({y}, {p})"
                ))
            }
        }
    }
    Ok(cm)
}

/// Rates of a confusion matrix. A `0/0` precision or recall is reported
/// as 0 and flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return data_err("cannot score an empty confusion matrix");
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Scores {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `≥ threshold` are called positive; the first point uses +∞,
    /// which JSON stores as `null`.
    #[serde(deserialize_with = "null_as_infinity")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over the distinct scores in descending order, from `(0, 0)`
/// to `(1, 1)`, and its trapezoidal area. Tied scores move in one step.
fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    if labels.len() != scores.len() {
        return data_err(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        ));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return data_err(format!("labels must be 0 or 1, got {l}"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return data_err("scores must not be NaN");
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return data_err("ROC needs at least one positive and one negative label");
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{:?},{:?},{:?}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    /// Absent when the selection holds a single class.
    pub auc: Option<f64>,
    pub roc_points: Vec<RocPoint>,
}

impl EvalEntry {
    pub fn from_predictions(labels: &[u8], scores_p1: &[f64], predictions: &[u8]) -> Result<Self> {
        let cm = confusion(labels, predictions)?;
        let s = scores(&cm)?;
        let (roc_points, auc) = match roc_auc(labels, scores_p1) {
            Ok((p, a)) => (p, Some(a)),
            Err(_) => (Vec::new(), None),
        };
        Ok(Self {
            n: labels.len(),
            confusion: cm,
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            precision_undefined: s.precision_undefined,
            recall_undefined: s.recall_undefined,
            auc,
            roc_points,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalEntry,
    pub per_magnification: BTreeMap<Magnification, EvalEntry>,
}

/// Eval-mode predictions: class-1 softmax probability as the score and the
/// arg-max class (ties to benign) as the prediction.
pub fn evaluate(
    model: &Model,
    set: &LoadedSet,
    pre: &PreprocessConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    if set.is_empty() {
        return data_err("cannot evaluate an empty selection");
    }
    let mut labels = vec![0u8; set.len()];
    let mut probs = vec![0f64; set.len()];
    let mut preds = vec![0u8; set.len()];
    for batch in set.batches(batch_size, None, None, pre)? {
        let batch = batch?;
        let tape = Tape::new();
        let p = model.params.map(&mut |_, t| tape.constant(t.clone()));
        let logits = forward(&model.config, &p, tape.constant(batch.x), false, 0)?;
        let soft = logits.softmax(1)?.value();
        let lv = logits.value();
        for (row, &i) in batch.indices.iter().enumerate() {
            labels[i] = set.samples[i].label.index();
            probs[i] = soft.at(&[row, 1]);
            preds[i] = (lv.at(&[row, 1]) > lv.at(&[row, 0])) as u8;
        }
    }
    let mut groups: BTreeMap<Magnification, Vec<usize>> = BTreeMap::new();
    for (i, s) in set.samples.iter().enumerate() {
        groups.entry(s.magnification).or_default().push(i);
    }
    let mut per_magnification = BTreeMap::new();
    for (mag, idx) in groups {
        let pick = |v: &[u8]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let scores: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
        per_magnification.insert(
            mag,
            EvalEntry::from_predictions(&pick(&labels), &scores, &pick(&preds))?,
        );
    }
    Ok(EvalReport {
        overall: EvalEntry::from_predictions(&labels, &probs, &preds)?,
        per_magnification,
    })
}
