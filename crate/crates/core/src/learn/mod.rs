//! Gradient-boosted trees, SMOTE, metrics and region-holdout cross-validation.

mod boost;
mod cv;
mod metrics;
mod smote;
mod tree;

pub use boost::{softmax, train_classifier, train_regressor, BoostedModel, Hyperparameters, Task};
pub use cv::{cross_validate, fold_info, region_folds, CvMode, CvOutcome, Fold, ModelSpec};
pub use metrics::{
    accuracy_report, nmse, AccuracyReport, FoldInfo, MetricRow, MetricsReport, Summary, CHANGE_TABLE_LABELS,
    CI_FOOTER, CI_Z, NMSE_LABEL, WATER_TABLE_LABELS,
};
pub use smote::{oversample_to_majority, smote, DEFAULT_SMOTE_K};
pub use tree::{best_split, grow_tree, split_gain, Matrix, Node, SortedColumns, SplitCandidate, SplitParams, Tree};
