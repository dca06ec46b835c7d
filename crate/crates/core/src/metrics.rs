//! Confusion metrics, ROC analysis and confidence intervals.
//!
//! Proportions use the Wilson score interval by default (Agresti–Coull on
//! request); the AUC interval uses the Hanley–McNeil standard error.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Cut-offs of the default operating-point table.
pub const DEFAULT_SWEEP: [f64; 5] = [0.5, 0.6, 0.7, 0.75, 0.8];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts from `(predicted_positive, actually_positive)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn basic_metrics(c: &ConfusionCounts) -> Result<BasicMetrics> {
    if c.total() == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty set"));
    }
    if c.positives() == 0 {
        return Err(Error::UndefinedMetric("sensitivity without positive cases"));
    }
    if c.negatives() == 0 {
        return Err(Error::UndefinedMetric("specificity without negative cases"));
    }
    Ok(BasicMetrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: c.tp as f64 / c.positives() as f64,
        specificity: c.tn as f64 / c.negatives() as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    #[default]
    Wilson,
    AgrestiCoull,
}

/// Two-sided standard-normal quantile for a confidence level in (0, 1).
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

fn check_counts(successes: usize, n: usize) -> Result<()> {
    if n == 0 || successes > n {
        return Err(Error::InvalidArgument(format!("invalid proportion {successes}/{n}")));
    }
    Ok(())
}

/// Wilson score interval. The ends are exactly 0 and 1 for 0/n and n/n.
pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    check_counts(successes, n)?;
    let z = z_for_level(level)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (centre - half).clamp(0.0, p) };
    let hi = if successes == n { 1.0 } else { (centre + half).clamp(p, 1.0) };
    Ok((lo, hi))
}

/// Agresti–Coull interval, clamped to `[0, 1]`.
pub fn agresti_coull_ci(successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    check_counts(successes, n)?;
    let z = z_for_level(level)?;
    let nt = n as f64 + z * z;
    let pt = (successes as f64 + z * z / 2.0) / nt;
    let half = z * (pt * (1.0 - pt) / nt).sqrt();
    Ok(((pt - half).max(0.0), (pt + half).min(1.0)))
}

pub fn proportion_ci(successes: usize, n: usize, level: f64, method: IntervalMethod) -> Result<(f64, f64)> {
    match method {
        IntervalMethod::Wilson => wilson_ci(successes, n, level),
        IntervalMethod::AgrestiCoull => agresti_coull_ci(successes, n, level),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; infinite for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// ROC over the distinct scores, with the trapezoidal AUC. Tied scores form
/// one step, which gives half credit to tied positive/negative pairs.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points[points.len() - 1];
        let p = RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: t,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve {
        points,
        auc,
        n_pos,
        n_neg,
    })
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Hanley–McNeil interval for an AUC, clamped to `[0, 1]`.
pub fn hanley_mcneil_ci(auc: f64, n_pos: usize, n_neg: usize, level: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&auc) {
        return Err(Error::InvalidArgument(format!("AUC {auc} outside [0, 1]")));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("Hanley–McNeil needs both classes".into()));
    }
    let z = z_for_level(level)?;
    let se = hanley_mcneil_se(auc, n_pos, n_neg);
    Ok(((auc - z * se).max(0.0), (auc + z * se).min(1.0)))
}

pub fn hanley_mcneil_se(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let a = auc;
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let var = (a * (1.0 - a) + (np - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) / (np * nn);
    var.max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffRow {
    pub cutoff: f64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Operating points at each cut-off, calling `score > cutoff` positive.
pub fn cutoff_sweep(scores: &[(f64, bool)], cutoffs: &[f64]) -> Result<Vec<CutoffRow>> {
    cutoffs
        .iter()
        .map(|&cutoff| {
            let counts = ConfusionCounts::from_pairs(scores.iter().map(|&(s, y)| (s > cutoff, y)));
            let m = basic_metrics(&counts)?;
            Ok(CutoffRow {
                cutoff,
                counts,
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Accuracy, sensitivity and specificity with proportion intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub counts: ConfusionCounts,
    pub accuracy: Estimate,
    pub sensitivity: Estimate,
    pub specificity: Estimate,
}

impl ClassificationSummary {
    pub fn from_counts(c: ConfusionCounts, level: f64, method: IntervalMethod) -> Result<Self> {
        let m = basic_metrics(&c)?;
        let est = |value, k, n| -> Result<Estimate> {
            let (lo, hi) = proportion_ci(k, n, level, method)?;
            Ok(Estimate { value, lo, hi })
        };
        Ok(ClassificationSummary {
            counts: c,
            accuracy: est(m.accuracy, c.tp + c.tn, c.total())?,
            sensitivity: est(m.sensitivity, c.tp, c.positives())?,
            specificity: est(m.specificity, c.tn, c.negatives())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ci_level: f64,
    pub ci_method: IntervalMethod,
    pub cutoff: f64,
    pub patients: ClassificationSummary,
    pub auc: Estimate,
    pub sweep: Vec<CutoffRow>,
    /// Stage-one slice-level results, when slice labels are available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slices: Option<ClassificationSummary>,
}

impl MetricsReport {
    /// Patient-level report from `(score, is_positive)` pairs; a patient is
    /// called positive when its score exceeds `cutoff`.
    pub fn from_scores(
        scores: &[(f64, bool)],
        cutoff: f64,
        level: f64,
        method: IntervalMethod,
    ) -> Result<(Self, RocCurve)> {
        let roc = roc_curve(scores)?;
        let counts = ConfusionCounts::from_pairs(scores.iter().map(|&(s, y)| (s > cutoff, y)));
        let (lo, hi) = hanley_mcneil_ci(roc.auc, roc.n_pos, roc.n_neg, level)?;
        let report = MetricsReport {
            ci_level: level,
            ci_method: method,
            cutoff,
            patients: ClassificationSummary::from_counts(counts, level, method)?,
            auc: Estimate { value: roc.auc, lo, hi },
            sweep: cutoff_sweep(scores, &DEFAULT_SWEEP)?,
            slices: None,
        };
        Ok((report, roc))
    }
}
