//! ROC curves and the area under them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelVector, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{LogisticModel, RegularizerKind};
use crate::preprocess::PcaTransform;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    /// Score at which each point is reached; `+∞` for the origin.
    pub thresholds: Vec<f64>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// ROC curve with tied scores advanced as one step.
///
/// The area is accumulated in integer counts, which makes it equal to the
/// pairwise statistic `(concordant + ½·tied) / (n_pos·n_neg)`.
pub fn roc_curve(scores: &[f64], labels: &LabelVector) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidData(format!("score {i} is NaN")));
    }
    let (n_neg, n_pos) = labels.class_counts();
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::SingleClass { context: None });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (n_pos as f64, n_neg as f64);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels.as_slice()[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / n, tp as f64 / p));
        thresholds.push(s);
    }
    let auc = twice_area as f64 / (2.0 * p * n);

    Ok(RocCurve {
        points,
        thresholds,
        auc,
        n_pos,
        n_neg,
    })
}

impl RocCurve {
    /// Trapezoid rule over the stored points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// `threshold,fpr,tpr` rows with a header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("threshold,fpr,tpr\n");
        for (t, (fpr, tpr)) in self.thresholds.iter().zip(&self.points) {
            out.push_str(&format!("{t},{fpr},{tpr}\n"));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSummary {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub alpha: f64,
    pub n_anchors: usize,
}

/// `eval-report.json`; the curve itself goes to `roc.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub regularizer: RegularizerSummary,
    pub split: String,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(skip)]
    pub curve: Option<RocCurve>,
}

/// Projects `dataset`, scores it with `model` and builds the ROC curve.
///
/// Rows are ranked by the logit rather than the probability: the ordering is
/// the same, but saturated probabilities would otherwise tie.
pub fn evaluate(
    model: &LogisticModel,
    transform: &PcaTransform,
    dataset: &LabeledDataset,
    split_name: &str,
) -> Result<EvalReport> {
    if !model.transform_id.is_empty() && model.transform_id != transform.id() {
        return Err(Error::InvalidData(format!(
            "model was trained under transform {} but {} was given",
            model.transform_id,
            transform.id()
        )));
    }
    let pcs = transform.apply(&dataset.features)?;
    let scores = model.decision_function(&pcs)?;
    let curve = roc_curve(&scores, &dataset.labels)?;
    Ok(EvalReport {
        model_id: model.id(),
        regularizer: RegularizerSummary {
            kind: model.regularizer.kind,
            lambda: model.regularizer.lambda,
            alpha: model.regularizer.alpha,
            n_anchors: model.regularizer.anchors.len(),
        },
        split: split_name.to_string(),
        auc: curve.auc,
        n_pos: curve.n_pos,
        n_neg: curve.n_neg,
        curve: Some(curve),
    })
}
