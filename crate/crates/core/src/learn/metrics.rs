//! Error and accuracy metrics, fold summaries and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// z value of the two-sided 95% interval used for fold summaries.
pub const CI_Z: f64 = 1.96;

pub const NMSE_LABEL: &str = "NMSE";
pub const WATER_TABLE_LABELS: [&str; 3] = ["Mean Overall Accuracy", "Water Frequency ≤ 0.25", "Water Frequency > 0.25"];
pub const CHANGE_TABLE_LABELS: [&str; 4] = ["Overall Accuracy", "-0.25 ≤ WF ≤ 0.25", "WF < -0.25", "WF > 0.25"];
pub const CI_FOOTER: &str = "± is 1.96 × the sample standard deviation of the per-fold values.";

/// Mean squared error divided by the population variance of `truth`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Length(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData("NMSE needs at least two targets".into()));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let var = truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::InvalidArgument("NMSE undefined for constant targets".into()));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    Ok(mse / var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub classes: Vec<i32>,
    pub n: usize,
    pub overall: f64,
    /// Per-class recall; `None` for a class without support.
    pub recall: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// `confusion[t][p]`: samples of true class `classes[t]` predicted as `classes[p]`.
    pub confusion: Vec<Vec<usize>>,
}

impl AccuracyReport {
    pub fn recall_of(&self, class: i32) -> Option<f64> {
        let k = self.classes.iter().position(|&c| c == class)?;
        self.recall[k]
    }
}

pub fn accuracy_report(pred: &[i32], truth: &[i32], classes: &[i32]) -> Result<AccuracyReport> {
    if pred.len() != truth.len() {
        return Err(Error::Length(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("accuracy of an empty set".into()));
    }
    let index = |c: i32| {
        classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} not in {classes:?}")))
    };
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[index(t)?][index(p)?] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let recall = (0..k)
        .map(|i| (support[i] > 0).then(|| confusion[i][i] as f64 / support[i] as f64))
        .collect();
    Ok(AccuracyReport {
        classes: classes.to_vec(),
        n: truth.len(),
        overall: correct as f64 / truth.len() as f64,
        recall,
        support,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_half_width: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Summary {
    /// `None` for no values; the half-width is 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (values.iter().sum::<f64>() / n as f64).clamp(min, max);
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            mean,
            ci_half_width: CI_Z * sd,
            min,
            max,
            n,
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.ci_half_width, self.mean + self.ci_half_width)
    }
}

/// One report row: a metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    /// Value per fold in fold order; `None` where undefined (no support).
    pub fold_values: Vec<Option<f64>>,
    pub summary: Option<Summary>,
}

impl MetricRow {
    pub fn new(label: &str, fold_values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = fold_values.iter().flatten().copied().collect();
        MetricRow {
            label: label.to_string(),
            summary: Summary::of(&defined),
            fold_values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub test_region: u32,
    pub train_regions: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub title: String,
    pub folds: Vec<FoldInfo>,
    pub rows: Vec<MetricRow>,
    /// Confusion over all folds' test predictions, when the task is a classification.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pooled: Option<AccuracyReport>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn mean(&self, label: &str) -> Option<f64> {
        self.row(label)?.summary.map(|s| s.mean)
    }

    /// Fixed-width text table, one row per metric as mean ± half-width.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "{:<width$}  {:>17}  {:>5}", "Metric", "Mean ± 95% CI", "Folds");
        for r in &self.rows {
            let pad = width - r.label.chars().count();
            match r.summary {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "{}{}  {:>17}  {:>5}",
                        r.label,
                        " ".repeat(pad),
                        format!("{:.2} ± {:.2}", s.mean, s.ci_half_width),
                        s.n
                    );
                }
                None => {
                    let _ = writeln!(out, "{}{}  {:>17}  {:>5}", r.label, " ".repeat(pad), "n/a", 0);
                }
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "Note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        let t = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert!((nmse(&[0.5; 4], &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((nmse(&[0.1, 0.9, 0.9, 0.1], &t).unwrap() - 0.04).abs() < 1e-12);
        assert!(nmse(&[0.1; 4], &[0.3; 4]).is_err());
        assert!(nmse(&[0.1], &[0.3]).is_err());
        assert!(nmse(&[0.1, 0.2], &[0.3]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let r = accuracy_report(&[0, 1, 1, 0], &[0, 1, 1, 0], &[0, 1]).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.recall, vec![Some(1.0), Some(1.0)]);

        let r = accuracy_report(&[0, 0, 0, 0], &[0, 0, 1, 1], &[0, 1]).unwrap();
        assert_eq!(r.overall, 0.5);
        assert_eq!(r.recall_of(0), Some(1.0));
        assert_eq!(r.recall_of(1), Some(0.0));
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);

        let truth = [-1, 0, 1, -1, 0, 1, 0];
        let pred = [-1, 1, 1, 0, 0, 1, -1];
        let r = accuracy_report(&pred, &truth, &[0, -1, 1]).unwrap();
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), r.support[i]);
        }
        let col_sums: Vec<usize> = (0..3).map(|j| r.confusion.iter().map(|row| row[j]).sum()).collect();
        for (j, &c) in r.classes.iter().enumerate() {
            assert_eq!(col_sums[j], pred.iter().filter(|&&p| p == c).count());
        }
        assert!(accuracy_report(&[0], &[0, 1], &[0, 1]).is_err());
        assert!(accuracy_report(&[2], &[0], &[0, 1]).is_err());
    }

    #[test]
    fn missing_class_has_undefined_recall() {
        let r = accuracy_report(&[0, 0], &[0, 0], &[0, 1]).unwrap();
        assert_eq!(r.recall, vec![Some(1.0), None]);
    }

    #[test]
    fn summaries() {
        let s = Summary::of(&[0.8, 0.8, 0.8]).unwrap();
        assert_eq!(s.mean, 0.8);
        assert_eq!(s.ci_half_width, 0.0);
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.ci_half_width - 1.96).abs() < 1e-12);
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert_eq!(Summary::of(&[]), None);
        assert_eq!(Summary::of(&[0.5]).unwrap().ci_half_width, 0.0);
    }

    #[test]
    fn table_lists_every_row() {
        let rows = WATER_TABLE_LABELS
            .iter()
            .map(|l| MetricRow::new(l, vec![Some(0.9), Some(0.92), None]))
            .collect();
        let rep = MetricsReport {
            title: "water".into(),
            folds: vec![],
            rows,
            pooled: None,
            notes: vec![CI_FOOTER.into()],
            config: None,
        };
        let t = rep.render_table();
        for l in WATER_TABLE_LABELS {
            assert!(t.contains(l));
        }
        assert!(t.contains("0.91 ± 0.03"));
        assert_eq!(rep.row(WATER_TABLE_LABELS[0]).unwrap().summary.unwrap().n, 2);
    }
}
