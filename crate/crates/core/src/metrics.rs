//! Confusion-matrix statistics for multi-class classification.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predicted} predictions for {actual} labels")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("label {label} is outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("confusion matrix must be square")]
    NotSquare,
}

/// `matrix[actual][predicted]` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let c = counts.len();
        if c < 2 {
            return Err(MetricsError::TooFewClasses(c));
        }
        if counts.iter().any(|row| row.len() != c) {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Samples whose true class is `k`.
    pub fn actual_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    /// Samples predicted as class `k`.
    pub fn predicted_total(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

pub fn confusion(
    predicted: &[usize],
    actual: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    if classes < 2 {
        return Err(MetricsError::TooFewClasses(classes));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        for label in [p, a] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// One-vs-rest statistics for a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Ratios that had a zero denominator and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_sensitivity: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(cm: &ConfusionMatrix, k: usize, label: String) -> ClassMetrics {
    let total = cm.total();
    let tp = cm.get(k, k);
    let fn_ = cm.actual_total(k) - tp;
    let fp = cm.predicted_total(k) - tp;
    let tn = total - tp - fn_ - fp;
    let mut undefined = Vec::new();
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let sensitivity = ratio(tp, tp + fn_, "sensitivity", &mut undefined);
    let specificity = ratio(tn, tn + fp, "specificity", &mut undefined);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        undefined.push("f1".into());
        0.0
    };
    ClassMetrics {
        label,
        support: tp + fn_,
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
        precision,
        sensitivity,
        specificity,
        f1,
        undefined,
    }
}

/// Generalized Matthews correlation
/// `(c·s − Σ p_k t_k) / sqrt((s² − Σ p_k²)(s² − Σ t_k²))`, 0 when the
/// denominator vanishes.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.correct() as f64;
    let mut pt = 0.0;
    let mut pp = 0.0;
    let mut tt = 0.0;
    for k in 0..cm.classes() {
        let p = cm.predicted_total(k) as f64;
        let t = cm.actual_total(k) as f64;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - pt) / den
    }
}

/// Full report; `labels` names the classes in matrix order (indices are
/// used when it is shorter).
pub fn report(cm: &ConfusionMatrix, labels: &[String]) -> MetricsReport {
    let c = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let label = labels.get(k).cloned().unwrap_or_else(|| k.to_string());
            class_metrics(cm, k, label)
        })
        .collect();
    let total = cm.total();
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let weighted_of = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        }
    };
    MetricsReport {
        total,
        accuracy: if total == 0 { 0.0 } else { cm.correct() as f64 / total as f64 },
        macro_precision: macro_of(|m| m.precision),
        macro_sensitivity: macro_of(|m| m.sensitivity),
        macro_specificity: macro_of(|m| m.specificity),
        macro_f1: macro_of(|m| m.f1),
        weighted_precision: weighted_of(|m| m.precision),
        weighted_sensitivity: weighted_of(|m| m.sensitivity),
        weighted_f1: weighted_of(|m| m.f1),
        mcc: mcc(cm),
        per_class,
        confusion: cm.clone(),
    }
}

impl MetricsReport {
    /// `key=value` lines for terminals and logs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total={}", self.total);
        for (key, value) in [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_sensitivity", self.macro_sensitivity),
            ("macro_specificity", self.macro_specificity),
            ("macro_f1", self.macro_f1),
            ("weighted_precision", self.weighted_precision),
            ("weighted_sensitivity", self.weighted_sensitivity),
            ("weighted_f1", self.weighted_f1),
            ("mcc", self.mcc),
        ] {
            let _ = writeln!(out, "{key}={value:.6}");
        }
        for m in &self.per_class {
            let _ = write!(
                out,
                "class={} support={} precision={:.6} sensitivity={:.6} specificity={:.6} f1={:.6}",
                m.label, m.support, m.precision, m.sensitivity, m.specificity, m.f1
            );
            if !m.undefined.is_empty() {
                let _ = write!(out, " undefined={}", m.undefined.join(","));
            }
            out.push('\n');
        }
        out
    }
}
