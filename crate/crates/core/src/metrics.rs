//! Evaluation quantities and the per-batch metric record.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::ProbMatrix;
use crate::numerics::entropy;

/// Fraction of ID rows whose prediction equals the label.
pub fn accuracy(pred: &[usize], truth: &[Option<usize>], id_mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != id_mask.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels, {} mask entries",
            pred.len(),
            truth.len(),
            id_mask.len()
        )));
    }
    let (mut right, mut total) = (0usize, 0usize);
    for ((p, t), &id) in pred.iter().zip(truth).zip(id_mask) {
        if id {
            total += 1;
            right += usize::from(t.as_ref() == Some(p));
        }
    }
    if total == 0 {
        return Err(Error::Invalid("accuracy needs at least one ID sample".into()));
    }
    Ok(right as f64 / total as f64)
}

/// Entropy (nats) of the histogram of predicted classes.
pub fn histogram_entropy(pred: &[usize], n_classes: usize) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; n_classes];
    for &p in pred {
        counts[p] += 1;
    }
    let n = pred.len() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    entropy(&freq)
}

/// Entropy of the batch's argmax histogram, in `[0, ln C]`.
pub fn prediction_entropy(q: &ProbMatrix) -> f64 {
    histogram_entropy(&q.argmax(), q.n_classes())
}

/// Mean per-sample entropy of `q`.
pub fn mean_confidence_entropy(q: &ProbMatrix) -> f64 {
    let n = q.n_samples();
    if n == 0 {
        return 0.0;
    }
    q.matrix().row_iter().map(entropy).sum::<f64>() / n as f64
}

pub fn unique_classes(pred: &[usize]) -> usize {
    let mut seen: Vec<usize> = pred.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// `(improvement, deterioration)`; each is `None` when its denominator
/// (wrong before, right before) is empty.
pub fn improvement_deterioration(
    pred_before: &[usize],
    pred_after: &[usize],
    truth: &[usize],
) -> Result<(Option<f64>, Option<f64>)> {
    if pred_before.len() != truth.len() || pred_after.len() != truth.len() {
        return Err(Error::Shape("prediction and label lengths differ".into()));
    }
    let (mut wrong, mut fixed, mut right, mut broken) = (0usize, 0usize, 0usize, 0usize);
    for ((b, a), t) in pred_before.iter().zip(pred_after).zip(truth) {
        if b == t {
            right += 1;
            broken += usize::from(a != t);
        } else {
            wrong += 1;
            fixed += usize::from(a == t);
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((ratio(fixed, wrong), ratio(broken, right)))
}

/// Mann–Whitney AUROC (ties credited ½) and the OOD rate above the
/// lower-interpolated 5th-percentile ID score. Higher scores mean ID.
pub fn auroc_fpr95(scores_id: &[f64], scores_ood: &[f64]) -> Result<(f64, f64)> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::Invalid("AUROC needs non-empty ID and OOD score sets".into()));
    }
    if scores_id.iter().chain(scores_ood).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("OOD scores"));
    }
    let mut id = scores_id.to_vec();
    let mut ood = scores_ood.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    // For each ID score count OOD scores strictly below and equal.
    let mut wins = 0.0;
    let (mut lo, mut hi) = (0usize, 0usize);
    for &s in &id {
        while lo < ood.len() && ood[lo] < s {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < ood.len() && ood[hi] <= s {
            hi += 1;
        }
        wins += lo as f64 + 0.5 * (hi - lo) as f64;
    }
    let auroc = wins / (id.len() as f64 * ood.len() as f64);
    let threshold = id[(0.05 * (id.len() - 1) as f64).floor() as usize];
    let above = ood.iter().filter(|&&s| s >= threshold).count();
    Ok((auroc, above as f64 / ood.len() as f64))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricRecord {
    pub batch_index: usize,
    pub accuracy: f64,
    pub mean_prediction_entropy: f64,
    pub mean_confidence_entropy: f64,
    pub unique_predicted_classes: usize,
    pub improvement_ratio: Option<f64>,
    pub deterioration_ratio: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub mu_id_minus_mu_ood: Option<f64>,
    pub alpha: Option<f64>,
    pub loss_terms: Option<LossReport>,
}

/// Column order of `metrics.csv`. Absent values are empty fields.
pub const METRIC_COLUMNS: [&str; 18] = [
    "batch_index",
    "accuracy",
    "mean_prediction_entropy",
    "mean_confidence_entropy",
    "unique_predicted_classes",
    "improvement_ratio",
    "deterioration_ratio",
    "auroc",
    "fpr95",
    "mu_id_minus_mu_ood",
    "alpha",
    "l_total",
    "l_scont",
    "l_scont_mem",
    "l_reg",
    "l_tent",
    "l_cont_hard",
    "l_oce",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricRecord {
    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let l = self.loss_terms.as_ref();
        let fields = [
            self.batch_index.to_string(),
            self.accuracy.to_string(),
            self.mean_prediction_entropy.to_string(),
            self.mean_confidence_entropy.to_string(),
            self.unique_predicted_classes.to_string(),
            opt(self.improvement_ratio),
            opt(self.deterioration_ratio),
            opt(self.auroc),
            opt(self.fpr95),
            opt(self.mu_id_minus_mu_ood),
            opt(self.alpha),
            opt(l.map(|l| l.l_total)),
            opt(l.map(|l| l.l_scont)),
            opt(l.and_then(|l| l.l_scont_mem)),
            opt(l.map(|l| l.l_reg)),
            opt(l.and_then(|l| l.l_tent)),
            opt(l.and_then(|l| l.l_cont_hard)),
            opt(l.and_then(|l| l.l_oce)),
        ];
        fields.join(",")
    }

    /// Numeric value of a column, `None` when absent.
    pub fn column(&self, name: &str) -> Option<f64> {
        let l = self.loss_terms.as_ref();
        match name {
            "batch_index" => Some(self.batch_index as f64),
            "accuracy" => Some(self.accuracy),
            "mean_prediction_entropy" => Some(self.mean_prediction_entropy),
            "mean_confidence_entropy" => Some(self.mean_confidence_entropy),
            "unique_predicted_classes" => Some(self.unique_predicted_classes as f64),
            "improvement_ratio" => self.improvement_ratio,
            "deterioration_ratio" => self.deterioration_ratio,
            "auroc" => self.auroc,
            "fpr95" => self.fpr95,
            "mu_id_minus_mu_ood" => self.mu_id_minus_mu_ood,
            "alpha" => self.alpha,
            "l_total" => l.map(|l| l.l_total),
            "l_scont" => l.map(|l| l.l_scont),
            "l_scont_mem" => l.and_then(|l| l.l_scont_mem),
            "l_reg" => l.map(|l| l.l_reg),
            "l_tent" => l.and_then(|l| l.l_tent),
            "l_cont_hard" => l.and_then(|l| l.l_cont_hard),
            "l_oce" => l.and_then(|l| l.l_oce),
            _ => None,
        }
    }
}

pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = MetricRecord::csv_header();
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Sample mean and normal 95% half-width `1.96 · sd / √n` (sample sd).
/// The half-width is 0 for a single value.
pub fn mean_half_width(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, 1.96 * var.sqrt() / n.sqrt()))
}
