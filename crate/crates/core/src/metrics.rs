//! Binary classification metrics. The positive class is label 1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        match (y, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => {
                return Err(Error::Contract(format!(
                    "example {i}: label {y} / prediction {p} outside {{0,1}}"
                )))
            }
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Precision/recall of class 1.
    Positive,
    /// Unweighted mean of per-class precision/recall.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64, undefined: &mut Vec<String>) -> f64 {
    if p + r == 0.0 {
        undefined.push("f1".into());
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Accuracy, precision, recall and F1 (harmonic mean of the reported
/// precision and recall).
pub fn classification_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<ClassificationMetrics> {
    if cm.total() == 0 {
        return Err(Error::Contract("confusion matrix is empty".into()));
    }
    let mut undefined = Vec::new();
    let accuracy = (cm.tp + cm.tn) as f64 / cm.total() as f64;
    let (precision, recall) = match averaging {
        Averaging::Positive => (
            ratio(cm.tp, cm.tp + cm.fp, "precision", &mut undefined),
            ratio(cm.tp, cm.tp + cm.fn_, "recall", &mut undefined),
        ),
        Averaging::Macro => {
            let p1 = ratio(cm.tp, cm.tp + cm.fp, "precision[1]", &mut undefined);
            let r1 = ratio(cm.tp, cm.tp + cm.fn_, "recall[1]", &mut undefined);
            let p0 = ratio(cm.tn, cm.tn + cm.fn_, "precision[0]", &mut undefined);
            let r0 = ratio(cm.tn, cm.tn + cm.fp, "recall[0]", &mut undefined);
            ((p0 + p1) / 2.0, (r0 + r1) / 2.0)
        }
    };
    let f1 = harmonic(precision, recall, &mut undefined);
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        undefined,
    })
}

/// ROC AUC as the Mann-Whitney rank statistic: the probability that a random
/// positive scores above a random negative, ties counting one half.
pub fn roc_auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetric {
    pub positive: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_total_s: Option<f64>,
    pub eval_total_s: f64,
}

/// Evaluation summary. Precision, recall and F1 carry both averaging
/// conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: AveragedMetric,
    pub recall: AveragedMetric,
    pub f1: AveragedMetric,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub timings: Timings,
}

impl EvalReport {
    /// Hard predictions use argmax of the two scores (ties go to class 0).
    pub fn from_scores(labels: &[usize], pos_scores: &[f64], timings: Timings) -> Result<Self> {
        let preds: Vec<usize> = pos_scores.iter().map(|&s| usize::from(s > 0.5)).collect();
        let cm = confusion(labels, &preds)?;
        let auc = roc_auc(labels, pos_scores).unwrap_or(f64::NAN);
        Self::from_confusion(cm, auc, timings)
    }

    pub fn from_confusion(cm: ConfusionMatrix, auc: f64, timings: Timings) -> Result<Self> {
        let p = classification_metrics(&cm, Averaging::Positive)?;
        let m = classification_metrics(&cm, Averaging::Macro)?;
        let avg = |a: f64, b: f64| AveragedMetric { positive: a, macro_: b };
        Ok(EvalReport {
            accuracy: p.accuracy,
            precision: avg(p.precision, m.precision),
            recall: avg(p.recall, m.recall),
            f1: avg(p.f1, m.f1),
            auc,
            confusion: cm,
            timings,
        })
    }

    pub const TSV_HEADER: &'static str =
        "averaging\taccuracy\tprecision\trecall\tf1\tauc\ttp\tfp\tfn\ttn\ttrain_time_s\teval_time_s";

    /// Header plus one row per averaging convention.
    pub fn to_tsv(&self) -> String {
        let c = &self.confusion;
        let train = self.timings.train_total_s.map_or_else(|| "NA".to_string(), |t| format!("{t:.3}"));
        let row = |name: &str, p: f64, r: f64, f: f64| {
            format!(
                "{name}\t{:.6}\t{p:.6}\t{r:.6}\t{f:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{train}\t{:.3}\n",
                self.accuracy, self.auc, c.tp, c.fp, c.fn_, c.tn, self.timings.eval_total_s
            )
        };
        let mut s = format!("{}\n", Self::TSV_HEADER);
        s += &row("positive", self.precision.positive, self.recall.positive, self.f1.positive);
        s += &row("macro", self.precision.macro_, self.recall.macro_, self.f1.macro_);
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        writeln!(
            f,
            "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "averaging", "accuracy", "precision", "recall", "f1", "auc"
        )?;
        for (name, p, r, f1) in [
            ("positive", self.precision.positive, self.recall.positive, self.f1.positive),
            ("macro", self.precision.macro_, self.recall.macro_, self.f1.macro_),
        ] {
            writeln!(
                f,
                "{name:<10} {:>9.4} {p:>9.4} {r:>9.4} {f1:>9.4} {:>9.4}",
                self.accuracy, self.auc
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<12} {:>10} {:>10}", "", "pred 0", "pred 1")?;
        writeln!(f, "{:<12} {:>10} {:>10}", "true 0", c.tn, c.fp)?;
        writeln!(f, "{:<12} {:>10} {:>10}", "true 1", c.fn_, c.tp)?;
        writeln!(f)?;
        if let Some(t) = self.timings.train_total_s {
            writeln!(f, "training time   {t:.3} s")?;
        }
        write!(f, "evaluation time {:.3} s", self.timings.eval_total_s)
    }
}
