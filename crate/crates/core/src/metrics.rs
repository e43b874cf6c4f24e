//! Evaluation metrics: confusion matrix, per-class and aggregate
//! precision/recall/F1, accuracy, multiclass Matthews correlation, and
//! one-vs-rest ROC-AUC via the Mann-Whitney rank statistic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k-by-k count matrix; rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    k: usize,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![0; k * k],
            k,
        }
    }

    pub fn from_labels(gold: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion_matrix",
                left: vec![gold.len()],
                right: vec![pred.len()],
            });
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= k || p >= k {
                return Err(Error::LabelRange {
                    label: g.max(p) as i64,
                    limit: k,
                    line: 0,
                });
            }
            cm.counts[g * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Gold count of class c.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    /// Predicted count of class c.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, c)).sum()
    }

    /// Plain comma-separated values, one row of gold counts per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for g in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|p| self.get(g, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 with support, macro and
/// support-weighted averages, accuracy, and MCC. Divisions 0/0 are
/// defined as 0.
pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let mut per_class = Vec::with_capacity(cm.k());
    for c in 0..cm.k() {
        let tp = cm.get(c, c) as f64;
        let precision = ratio(tp, cm.predicted(c) as f64);
        let recall = ratio(tp, cm.support(c) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: cm.support(c),
        });
    }
    let kf = cm.k() as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / kf,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / kf,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / kf,
    };
    let weight = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let weighted_avg = Averages {
        precision: weight(|m| m.precision),
        recall: weight(|m| m.recall),
        f1: weight(|m| m.f1),
    };
    Ok(ClassReport {
        per_class,
        macro_avg,
        weighted_avg,
        accuracy: cm.trace() as f64 / total as f64,
        mcc: mcc(cm),
    })
}

/// Multiclass Matthews correlation:
/// `(c*s - sum_k p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))`,
/// with c the trace, s the total, t_k gold counts, p_k predicted
/// counts. A degenerate denominator yields 0.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let mut pt = 0.0;
    let mut pp = 0.0;
    let mut tt = 0.0;
    for k in 0..cm.k() {
        let p = cm.predicted(k) as f64;
        let t = cm.support(k) as f64;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (c * s - pt) / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocAuc {
    /// Binary one-vs-rest AUC per class; `None` where the class has no
    /// positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the classes that were scored.
    pub macro_auc: Option<f64>,
    /// Classes skipped for missing positives or negatives.
    pub skipped: Vec<usize>,
}

/// Binary AUC of `scores` against `positive` flags via the
/// Mann-Whitney statistic with midranks for ties.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j) shares the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest ROC-AUC per class plus the macro average over classes
/// with both positives and negatives present.
pub fn roc_auc_ovr(gold: &[usize], probs: &[Vec<f64>]) -> Result<RocAuc> {
    if gold.len() != probs.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc_ovr",
            left: vec![gold.len()],
            right: vec![probs.len()],
        });
    }
    let k = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::ShapeMismatch {
                op: "roc_auc_ovr",
                left: vec![k],
                right: vec![row.len()],
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "probability row {i} sums to {sum}, not 1"
            )));
        }
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
        return Err(Error::LabelRange {
            label: bad as i64,
            limit: k,
            line: 0,
        });
    }
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = gold.iter().map(|&g| g == c).collect();
        let auc = binary_auc(&scores, &positive);
        if auc.is_none() {
            skipped.push(c);
        }
        per_class.push(auc);
    }
    let scored: Vec<f64> = per_class.iter().filter_map(|&a| a).collect();
    let macro_auc = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    };
    Ok(RocAuc {
        per_class,
        macro_auc,
        skipped,
    })
}

/// Everything the evaluation emits, in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub report: ClassReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roc_auc: Option<RocAuc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Full-precision JSON that re-parses into the same report.
    Json,
    /// Human-readable table with values rounded to two decimals.
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Usage(format!("unknown report format \"{other}\""))),
        }
    }
}

pub fn render_report(report: &ClassReport, roc_auc: Option<&RocAuc>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let full = FullReport {
                report: report.clone(),
                roc_auc: roc_auc.cloned(),
            };
            let mut s = serde_json::to_string_pretty(&full).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let mut s = String::new();
            s.push_str(&format!(
                "{:<14} {:>10} {:>10} {:>10} {:>10}\n",
                "Class", "Precision", "Recall", "F1-score", "Support"
            ));
            for (c, m) in report.per_class.iter().enumerate() {
                s.push_str(&format!(
                    "{:<14} {:>10.2} {:>10.2} {:>10.2} {:>10}\n",
                    c, m.precision, m.recall, m.f1, m.support
                ));
            }
            let total: u64 = report.per_class.iter().map(|m| m.support).sum();
            for (name, avg) in [
                ("Macro avg", &report.macro_avg),
                ("Weighted avg", &report.weighted_avg),
            ] {
                s.push_str(&format!(
                    "{:<14} {:>10.2} {:>10.2} {:>10.2} {:>10}\n",
                    name, avg.precision, avg.recall, avg.f1, total
                ));
            }
            s.push_str(&format!("\nOverall accuracy  {:.2}%\n", report.accuracy * 100.0));
            s.push_str(&format!("MCC               {:.2}\n", report.mcc));
            if let Some(auc) = roc_auc {
                match auc.macro_auc {
                    Some(m) => s.push_str(&format!("Macro ROC-AUC     {m:.2}\n")),
                    None => s.push_str("Macro ROC-AUC     n/a\n"),
                }
                if !auc.skipped.is_empty() {
                    s.push_str(&format!("AUC skipped classes: {:?}\n", auc.skipped));
                }
            }
            s
        }
    }
}
