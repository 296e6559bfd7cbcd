//! Water-frequency change at segment breakpoints.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coldlite::{SegmentRecord, N_FEATURES};
use crate::error::{Error, Result};
use crate::labeling::{segment_indices, Dataset};
use crate::learn::{
    accuracy_report, fold_info, oversample_to_majority, region_folds, train_classifier, AccuracyReport,
    BoostedModel, Hyperparameters, Matrix, MetricRow, MetricsReport, ModelSpec, CHANGE_TABLE_LABELS, CI_FOOTER,
};

/// Absolute water-frequency difference above which a change counts.
pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.25;

pub const DECREASE: i32 = -1;
pub const UNCHANGED: i32 = 0;
pub const INCREASE: i32 = 1;
/// Delta classes in report order.
pub const DELTA_CLASSES: [i32; 3] = [UNCHANGED, DECREASE, INCREASE];

/// Class index used by classifiers for each delta class.
pub fn class_index(delta: i32) -> Result<usize> {
    match delta {
        DECREASE => Ok(0),
        UNCHANGED => Ok(1),
        INCREASE => Ok(2),
        _ => Err(Error::InvalidArgument(format!("delta class {delta}"))),
    }
}

pub fn class_from_index(k: usize) -> i32 {
    [DECREASE, UNCHANGED, INCREASE][k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub x: usize,
    pub y: usize,
    pub region_id: u32,
    /// Index of the segment before the break among its pixel's segments.
    pub seg_idx: usize,
    pub break_time: f64,
    pub features_before: Vec<f64>,
    pub features_after: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wf_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wf_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_class: Option<i32>,
}

impl ChangeRecord {
    /// Before and after features concatenated (112 values).
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * N_FEATURES);
        v.extend_from_slice(&self.features_before);
        v.extend_from_slice(&self.features_after);
        v
    }
}

/// One record per pair of consecutive segments of a pixel where the earlier one ended in
/// a break. Sorted by `(x, y, break_time)`.
pub fn extract_break_pairs(records: &[SegmentRecord], region_id: u32) -> Vec<ChangeRecord> {
    let mut by_pixel: BTreeMap<(usize, usize), Vec<(usize, &SegmentRecord)>> = BTreeMap::new();
    for (rec, idx) in records.iter().zip(segment_indices(records)) {
        by_pixel.entry((rec.x, rec.y)).or_default().push((idx, rec));
    }
    let mut out: Vec<ChangeRecord> = by_pixel
        .into_values()
        .flat_map(|segs| {
            segs.windows(2)
                .filter(|w| w[0].1.ended_by_break)
                .map(|w| ChangeRecord {
                    x: w[0].1.x,
                    y: w[0].1.y,
                    region_id,
                    seg_idx: w[0].0,
                    break_time: w[0].1.break_time.unwrap_or(w[1].1.t_start),
                    features_before: w[0].1.features.clone(),
                    features_after: w[1].1.features.clone(),
                    wf_before: None,
                    wf_after: None,
                    delta_class: None,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(|a, b| (a.x, a.y).cmp(&(b.x, b.y)).then(a.break_time.total_cmp(&b.break_time)));
    out
}

/// +1 if `after - before > threshold`, -1 if below `-threshold`, else 0.
pub fn classify_delta_with(wf_before: f64, wf_after: f64, threshold: f64) -> Result<i32> {
    for v in [wf_before, wf_after] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("water frequency {v} outside [0, 1]")));
        }
    }
    let d = wf_after - wf_before;
    Ok(if d > threshold {
        INCREASE
    } else if d < -threshold {
        DECREASE
    } else {
        UNCHANGED
    })
}

pub fn classify_delta(wf_before: f64, wf_after: f64) -> Result<i32> {
    classify_delta_with(wf_before, wf_after, DEFAULT_DELTA_THRESHOLD)
}

/// Copies segment labels from a dataset of the same region; records whose either side
/// has no label are dropped. Returns the labeled records and the number dropped.
pub fn attach_labels(records: &[ChangeRecord], ds: &Dataset, threshold: f64) -> Result<(Vec<ChangeRecord>, usize)> {
    let wf: BTreeMap<(u32, usize, usize, usize), f64> = ds
        .samples
        .iter()
        .map(|s| ((s.region_id, s.x, s.y, s.seg_idx), s.wf))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let before = wf.get(&(r.region_id, r.x, r.y, r.seg_idx));
        let after = wf.get(&(r.region_id, r.x, r.y, r.seg_idx + 1));
        match (before, after) {
            (Some(&b), Some(&a)) => out.push(ChangeRecord {
                wf_before: Some(b),
                wf_after: Some(a),
                delta_class: Some(classify_delta_with(b, a, threshold)?),
                ..r.clone()
            }),
            _ => dropped += 1,
        }
    }
    Ok((out, dropped))
}

fn check_features(rec: &ChangeRecord) -> Result<()> {
    if rec.features_before.len() != N_FEATURES || rec.features_after.len() != N_FEATURES {
        return Err(Error::Length(format!(
            "change record at ({}, {}) has {}+{} features, expected {N_FEATURES}+{N_FEATURES}",
            rec.x,
            rec.y,
            rec.features_before.len(),
            rec.features_after.len()
        )));
    }
    Ok(())
}

/// Delta class from regressed water frequency on both sides of the break.
pub fn change_via_regression(regressor: &BoostedModel, rec: &ChangeRecord, threshold: f64) -> Result<i32> {
    check_features(rec)?;
    let before = regressor.predict_value(&rec.features_before)?;
    let after = regressor.predict_value(&rec.features_after)?;
    classify_delta_with(before, after, threshold)
}

fn labeled_classes(records: &[ChangeRecord]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            let d = r
                .delta_class
                .ok_or_else(|| Error::InvalidArgument(format!("change record at ({}, {}) has no label", r.x, r.y)))?;
            class_index(d)
        })
        .collect()
}

/// Three-class classifier on the concatenated before/after features. With `use_smote`,
/// minority classes are oversampled to the majority count first.
pub fn train_change_classifier(
    records: &[ChangeRecord],
    hp: &Hyperparameters,
    use_smote: bool,
    smote_k: usize,
) -> Result<BoostedModel> {
    for r in records {
        check_features(r)?;
    }
    let mut labels = labeled_classes(records)?;
    let mut rows: Vec<Vec<f64>> = records.iter().map(ChangeRecord::concatenated).collect();
    if use_smote {
        oversample_to_majority(&mut rows, &mut labels, 3, smote_k, hp.seed)?;
    }
    train_classifier(&Matrix::from_rows(&rows)?, &labels, 3, hp)
}

pub fn predict_change_class(model: &BoostedModel, rec: &ChangeRecord) -> Result<i32> {
    check_features(rec)?;
    Ok(class_from_index(model.predict_class(&rec.concatenated())?))
}

/// Overall accuracy and per-class recall over classes unchanged, decrease, increase.
pub fn evaluate_change(preds: &[i32], truths: &[i32]) -> Result<AccuracyReport> {
    accuracy_report(preds, truths, &DELTA_CLASSES)
}

/// How change classes are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangePath {
    /// Difference of regressed water frequencies.
    Regression,
    /// Direct three-class classifier on concatenated features.
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeCvOutcome {
    pub report: MetricsReport,
    /// Out-of-fold delta class per input record.
    pub predictions: Vec<i32>,
}

/// Leave-one-region-out evaluation of change classes on labeled records.
///
/// The regression path needs one water-frequency regressor per held-out region, trained
/// without that region (`regressors[region]`).
pub fn cross_validate_change(
    records: &[ChangeRecord],
    path: ChangePath,
    spec: &ModelSpec,
    delta_threshold: f64,
    regressors: &BTreeMap<u32, BoostedModel>,
) -> Result<ChangeCvOutcome> {
    let truths: Vec<i32> = labeled_classes(records)?.into_iter().map(class_from_index).collect();
    let region_of: Vec<u32> = records.iter().map(|r| r.region_id).collect();
    let folds = region_folds(&region_of)?;
    let fold_preds: Vec<Vec<i32>> = folds
        .par_iter()
        .map(|fold| -> Result<Vec<i32>> {
            let test: Vec<&ChangeRecord> = fold.test.iter().map(|&i| &records[i]).collect();
            match path {
                ChangePath::Regression => {
                    let model = regressors.get(&fold.test_region).ok_or_else(|| {
                        Error::InvalidArgument(format!("no regressor held out from region {}", fold.test_region))
                    })?;
                    test.iter()
                        .map(|r| change_via_regression(model, r, delta_threshold))
                        .collect()
                }
                ChangePath::Classification => {
                    let train: Vec<ChangeRecord> = fold.train.iter().map(|&i| records[i].clone()).collect();
                    let hp = Hyperparameters {
                        seed: spec.hyperparameters.seed ^ u64::from(fold.test_region),
                        ..spec.hyperparameters
                    };
                    let model = train_change_classifier(&train, &hp, spec.smote, spec.smote_k)?;
                    test.iter().map(|r| predict_change_class(&model, r)).collect()
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut predictions = vec![UNCHANGED; records.len()];
    let mut per_fold = Vec::with_capacity(folds.len());
    for (fold, preds) in folds.iter().zip(&fold_preds) {
        let t: Vec<i32> = fold.test.iter().map(|&i| truths[i]).collect();
        per_fold.push(evaluate_change(preds, &t)?);
        for (&i, &p) in fold.test.iter().zip(preds) {
            predictions[i] = p;
        }
    }
    let rows = vec![
        MetricRow::new(CHANGE_TABLE_LABELS[0], per_fold.iter().map(|r| Some(r.overall)).collect()),
        MetricRow::new(CHANGE_TABLE_LABELS[1], per_fold.iter().map(|r| r.recall_of(UNCHANGED)).collect()),
        MetricRow::new(CHANGE_TABLE_LABELS[2], per_fold.iter().map(|r| r.recall_of(DECREASE)).collect()),
        MetricRow::new(CHANGE_TABLE_LABELS[3], per_fold.iter().map(|r| r.recall_of(INCREASE)).collect()),
    ];
    let title = match path {
        ChangePath::Regression => "Water change detection, regression difference (leave-one-region-out)",
        ChangePath::Classification => "Water change detection, direct classification (leave-one-region-out)",
    };
    let mut notes = vec![
        CI_FOOTER.to_string(),
        format!("Change classes: difference of water frequency after minus before, unchanged within ±{delta_threshold} inclusive."),
    ];
    if path == ChangePath::Classification && spec.smote {
        notes.push("Minority classes oversampled with SMOTE inside each training fold.".into());
    }
    Ok(ChangeCvOutcome {
        report: MetricsReport {
            title: title.into(),
            folds: folds.iter().map(|f| fold_info(f, &region_of)).collect(),
            rows,
            pooled: Some(evaluate_change(&predictions, &truths)?),
            notes,
            config: Some(serde_json::to_value(spec)?),
        },
        predictions,
    })
}
