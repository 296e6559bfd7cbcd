//! Leave-one-region-out cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boost::{train_classifier, train_regressor, BoostedModel, Hyperparameters};
use super::metrics::{
    accuracy_report, nmse, FoldInfo, MetricRow, MetricsReport, CI_FOOTER, NMSE_LABEL, WATER_TABLE_LABELS,
};
use super::smote::{oversample_to_majority, DEFAULT_SMOTE_K};
use super::tree::Matrix;
use crate::error::{Error, Result};
use crate::labeling::{binarize_wf, Dataset, DEFAULT_WF_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Water-frequency regression; accuracy rows come from thresholding predictions.
    Regression,
    /// Direct water / land classification of the thresholded labels.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hyperparameters: Hyperparameters,
    /// Balance classes with SMOTE inside each training fold (classification only).
    pub smote: bool,
    pub smote_k: usize,
    pub wf_threshold: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hyperparameters: Hyperparameters::default(),
            smote: false,
            smote_k: DEFAULT_SMOTE_K,
            wf_threshold: DEFAULT_WF_THRESHOLD,
        }
    }
}

/// One fold: held-out region with train and test sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub test_region: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct region, in increasing region order.
pub fn region_folds(region_of: &[u32]) -> Result<Vec<Fold>> {
    let regions: BTreeSet<u32> = region_of.iter().copied().collect();
    if regions.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cross-validation needs at least 2 regions, found {}",
            regions.len()
        )));
    }
    Ok(regions
        .into_iter()
        .map(|r| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..region_of.len()).partition(|&i| region_of[i] == r);
            Fold {
                test_region: r,
                train,
                test,
            }
        })
        .collect())
}

pub fn fold_info(fold: &Fold, region_of: &[u32]) -> FoldInfo {
    FoldInfo {
        test_region: fold.test_region,
        train_regions: fold
            .train
            .iter()
            .map(|&i| region_of[i])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        n_train: fold.train.len(),
        n_test: fold.test.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub report: MetricsReport,
    /// Out-of-fold prediction per dataset sample: water frequency for regression,
    /// water probability for classification.
    pub predictions: Vec<f64>,
    /// Model of each fold, keyed by its held-out region.
    pub models: BTreeMap<u32, BoostedModel>,
}

struct FoldResult {
    model: BoostedModel,
    predictions: Vec<f64>,
    nmse: Option<f64>,
    accuracy: super::metrics::AccuracyReport,
}

pub fn cross_validate(ds: &Dataset, spec: &ModelSpec, mode: CvMode) -> Result<CvOutcome> {
    let region_of: Vec<u32> = ds.samples.iter().map(|s| s.region_id).collect();
    let folds = region_folds(&region_of)?;
    let classes: Vec<i32> = ds
        .samples
        .iter()
        .map(|s| binarize_wf(s.wf, spec.wf_threshold).map(i32::from))
        .collect::<Result<_>>()?;

    let results: Vec<FoldResult> = folds
        .par_iter()
        .map(|fold| run_fold(ds, &classes, fold, spec, mode))
        .collect::<Result<_>>()?;

    let mut predictions = vec![0.0; ds.len()];
    let mut pooled_pred = vec![0i32; ds.len()];
    for (fold, res) in folds.iter().zip(&results) {
        for (&i, &p) in fold.test.iter().zip(&res.predictions) {
            predictions[i] = p;
            pooled_pred[i] = predicted_class(p, mode, spec.wf_threshold);
        }
    }

    let mut rows = Vec::new();
    if mode == CvMode::Regression {
        rows.push(MetricRow::new(NMSE_LABEL, results.iter().map(|r| r.nmse).collect()));
    }
    rows.push(MetricRow::new(
        WATER_TABLE_LABELS[0],
        results.iter().map(|r| Some(r.accuracy.overall)).collect(),
    ));
    rows.push(MetricRow::new(
        WATER_TABLE_LABELS[1],
        results.iter().map(|r| r.accuracy.recall_of(0)).collect(),
    ));
    rows.push(MetricRow::new(
        WATER_TABLE_LABELS[2],
        results.iter().map(|r| r.accuracy.recall_of(1)).collect(),
    ));

    let title = match mode {
        CvMode::Regression => "Water-body mapping, regression (leave-one-region-out)",
        CvMode::Classification => "Water-body mapping, classification (leave-one-region-out)",
    };
    let mut notes = vec![CI_FOOTER.to_string()];
    notes.push("Per-class rows are recalls: correct predictions within the true class over its support.".into());
    if mode == CvMode::Regression {
        notes.push(format!(
            "Accuracy rows threshold predicted water frequency at {} (water iff greater).",
            spec.wf_threshold
        ));
    }
    let report = MetricsReport {
        title: title.into(),
        folds: folds.iter().map(|f| fold_info(f, &region_of)).collect(),
        rows,
        pooled: Some(accuracy_report(&pooled_pred, &classes, &[0, 1])?),
        notes,
        config: Some(serde_json::to_value(spec)?),
    };
    let models = folds
        .iter()
        .zip(results)
        .map(|(f, r)| (f.test_region, r.model))
        .collect();
    Ok(CvOutcome {
        report,
        predictions,
        models,
    })
}

fn predicted_class(p: f64, mode: CvMode, wf_threshold: f64) -> i32 {
    match mode {
        CvMode::Regression => (p > wf_threshold) as i32,
        CvMode::Classification => (p > 0.5) as i32,
    }
}

fn run_fold(ds: &Dataset, classes: &[i32], fold: &Fold, spec: &ModelSpec, mode: CvMode) -> Result<FoldResult> {
    let mut rows: Vec<Vec<f64>> = fold.train.iter().map(|&i| ds.samples[i].features.clone()).collect();
    let test_x = Matrix::from_rows(&fold.test.iter().map(|&i| &ds.samples[i].features).collect::<Vec<_>>())?;
    let truth_wf: Vec<f64> = fold.test.iter().map(|&i| ds.samples[i].wf).collect();
    let truth_cls: Vec<i32> = fold.test.iter().map(|&i| classes[i]).collect();

    let (model, predictions): (BoostedModel, Vec<f64>) = match mode {
        CvMode::Regression => {
            let y: Vec<f64> = fold.train.iter().map(|&i| ds.samples[i].wf).collect();
            let model = train_regressor(&Matrix::from_rows(&rows)?, &y, &spec.hyperparameters)?;
            let p = test_x.rows().map(|r| model.predict_value(r)).collect::<Result<_>>()?;
            (model, p)
        }
        CvMode::Classification => {
            let mut labels: Vec<usize> = fold.train.iter().map(|&i| classes[i] as usize).collect();
            if spec.smote {
                let seed = spec.hyperparameters.seed ^ u64::from(fold.test_region);
                oversample_to_majority(&mut rows, &mut labels, 2, spec.smote_k, seed)?;
            }
            let model = train_classifier(&Matrix::from_rows(&rows)?, &labels, 2, &spec.hyperparameters)?;
            let p = test_x
                .rows()
                .map(|r| model.predict_proba(r).map(|p| p[1]))
                .collect::<Result<_>>()?;
            (model, p)
        }
    };
    let pred_cls: Vec<i32> = predictions
        .iter()
        .map(|&p| predicted_class(p, mode, spec.wf_threshold))
        .collect();
    Ok(FoldResult {
        model,
        nmse: match mode {
            CvMode::Regression => nmse(&predictions, &truth_wf).ok(),
            CvMode::Classification => None,
        },
        accuracy: accuracy_report(&pred_cls, &truth_cls, &[0, 1])?,
        predictions,
    })
}
