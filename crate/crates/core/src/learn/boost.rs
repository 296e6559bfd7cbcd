//! Gradient boosting for squared-error regression and softmax classification.

use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, Matrix, SortedColumns, SplitParams, Tree};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            n_rounds: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            l2: 1.0,
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning_rate {} not in (0, 1]", self.learning_rate)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be finite and >= 0", self.l2)));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        SplitParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            l2: self.l2,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub task: Task,
    pub n_features: usize,
    pub base_scores: Vec<f64>,
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
    pub trees: Vec<Tree>,
    /// Training loss before the first round and after each round (mean squared error or
    /// mean negative log-likelihood).
    pub train_loss: Vec<f64>,
}

fn check_training_set(x: &Matrix, n_labels: usize) -> Result<()> {
    if x.n_rows() == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if x.n_rows() != n_labels {
        return Err(Error::Length(format!("{} rows for {} labels", x.n_rows(), n_labels)));
    }
    Ok(())
}

pub fn train_regressor(x: &Matrix, y: &[f64], hp: &Hyperparameters) -> Result<BoostedModel> {
    hp.validate()?;
    check_training_set(x, y.len())?;
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite target {v}")));
    }
    let n = y.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let cols = SortedColumns::new(x);
    let params = hp.split_params();
    let mut f = vec![base; n];
    let mse = |f: &[f64]| f.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64;
    let mut loss = vec![mse(&f)];
    let h = vec![1.0; n];
    let mut g = vec![0.0; n];
    let mut trees = Vec::with_capacity(hp.n_rounds);
    for _ in 0..hp.n_rounds {
        for i in 0..n {
            g[i] = f[i] - y[i];
        }
        let (tree, leaves) = grow_tree(x, &cols, &g, &h, &params, 0);
        for i in 0..n {
            f[i] += leaf_value(&tree, leaves[i]);
        }
        trees.push(tree);
        loss.push(mse(&f));
    }
    Ok(BoostedModel {
        task: Task::Regression,
        n_features: x.n_cols(),
        base_scores: vec![base],
        hyperparameters: *hp,
        seed: hp.seed,
        trees,
        train_loss: loss,
    })
}

fn leaf_value(tree: &Tree, k: usize) -> f64 {
    match tree.nodes[k] {
        super::tree::Node::Leaf { value } => value,
        super::tree::Node::Split { .. } => unreachable!("sample assigned to a split node"),
    }
}

const MIN_HESSIAN: f64 = 1e-16;
const MIN_PROB: f64 = 1e-300;

/// Softmax with the maximum subtracted.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// K-class softmax boosting; labels are class indices `0..n_classes`.
pub fn train_classifier(x: &Matrix, labels: &[usize], n_classes: usize, hp: &Hyperparameters) -> Result<BoostedModel> {
    hp.validate()?;
    check_training_set(x, labels.len())?;
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("{n_classes} classes")));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {c} outside 0..{n_classes}")));
    }
    let n = labels.len();
    let mut counts = vec![0usize; n_classes];
    for &c in labels {
        counts[c] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InsufficientData("classifier needs at least two classes present".into()));
    }
    // log priors; absent classes get a floor well below any present class
    let base: Vec<f64> = counts
        .iter()
        .map(|&c| ((c.max(1) as f64) / (n as f64 + 1.0)).ln())
        .collect();

    let cols = SortedColumns::new(x);
    let params = hp.split_params();
    let mut f: Vec<f64> = (0..n).flat_map(|_| base.iter().copied()).collect();
    let nll = |f: &[f64]| {
        (0..n)
            .map(|i| -softmax(&f[i * n_classes..(i + 1) * n_classes])[labels[i]].max(MIN_PROB).ln())
            .sum::<f64>()
            / n as f64
    };
    let mut loss = vec![nll(&f)];
    let mut g = vec![vec![0.0; n]; n_classes];
    let mut h = vec![vec![0.0; n]; n_classes];
    let mut trees = Vec::with_capacity(hp.n_rounds * n_classes);
    for _ in 0..hp.n_rounds {
        for i in 0..n {
            let p = softmax(&f[i * n_classes..(i + 1) * n_classes]);
            for k in 0..n_classes {
                let y = (labels[i] == k) as u8 as f64;
                g[k][i] = p[k] - y;
                h[k][i] = (2.0 * p[k] * (1.0 - p[k])).max(MIN_HESSIAN);
            }
        }
        let mut round = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            round.push(grow_tree(x, &cols, &g[k], &h[k], &params, k));
        }
        for (tree, leaves) in round {
            for i in 0..n {
                f[i * n_classes + tree.class] += leaf_value(&tree, leaves[i]);
            }
            trees.push(tree);
        }
        loss.push(nll(&f));
    }
    Ok(BoostedModel {
        task: Task::Classification { n_classes },
        n_features: x.n_cols(),
        base_scores: base,
        hyperparameters: *hp,
        seed: hp.seed,
        trees,
        train_loss: loss,
    })
}

impl BoostedModel {
    pub fn n_outputs(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification { n_classes } => n_classes,
        }
    }

    /// Checks internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.base_scores.len() != self.n_outputs() || self.base_scores.iter().any(|b| !b.is_finite()) {
            return Err(Error::Format("base scores do not match the task".into()));
        }
        for t in &self.trees {
            if t.class >= self.n_outputs() {
                return Err(Error::Format(format!("tree for output {} of {}", t.class, self.n_outputs())));
            }
            t.validate(self.n_features)?;
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Length(format!(
                "{} features, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    /// Summed scores per output, before clamping or softmax.
    pub fn raw_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut s = self.base_scores.clone();
        for t in &self.trees {
            s[t.class] += t.predict(x);
        }
        Ok(s)
    }

    /// Regression: water frequency clamped to [0, 1].
    pub fn predict_value(&self, x: &[f64]) -> Result<f64> {
        if self.task != Task::Regression {
            return Err(Error::InvalidArgument("predict_value on a classifier".into()));
        }
        Ok(self.raw_scores(x)?[0].clamp(0.0, 1.0))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.task == Task::Regression {
            return Err(Error::InvalidArgument("predict_proba on a regressor".into()));
        }
        Ok(softmax(&self.raw_scores(x)?))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(x)?;
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tree::Node;
    use super::*;

    fn hp(rounds: usize, depth: usize, lr: f64, min_leaf: usize, l2: f64) -> Hyperparameters {
        Hyperparameters {
            n_rounds: rounds,
            max_depth: depth,
            learning_rate: lr,
            min_samples_leaf: min_leaf,
            l2,
            seed: 7,
        }
    }

    fn wavy(n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| ((i * (2 * j + 3) + j) as f64 * 0.618).fract()).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    /// Reference prediction: walk each tree by hand from the JSON-level node list.
    fn walk_oracle(m: &BoostedModel, x: &[f64]) -> Vec<f64> {
        let mut s = m.base_scores.clone();
        for t in &m.trees {
            let mut k = 0usize;
            let v = loop {
                match &t.nodes[k] {
                    Node::Leaf { value } => break *value,
                    Node::Split { feature, threshold, left, right } => {
                        k = if x[*feature] >= *threshold { *right } else { *left };
                    }
                }
            };
            s[t.class] += v;
        }
        s
    }

    #[test]
    fn constant_target() {
        let x = wavy(50, 3);
        let m = train_regressor(&x, &[0.3; 50], &Hyperparameters::default()).unwrap();
        for r in x.rows() {
            assert!((m.predict_value(r).unwrap() - 0.3).abs() < 1e-15);
        }
        assert!((m.predict_value(&[9.0, 9.0, 9.0]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn one_stump_gives_half_means() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0]).collect();
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 0.1 + 0.01 * (i % 3) as f64 } else { 0.8 + 0.02 * (i % 2) as f64 }).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = train_regressor(&x, &y, &hp(1, 1, 1.0, 1, 0.0)).unwrap();
        let lo = y[..20].iter().sum::<f64>() / 20.0;
        let hi = y[20..].iter().sum::<f64>() / 20.0;
        assert!((m.predict_value(&[0.1]).unwrap() - lo).abs() < 1e-12);
        assert!((m.predict_value(&[0.9]).unwrap() - hi).abs() < 1e-12);
    }

    #[test]
    fn empty_model_predicts_base() {
        let x = wavy(30, 2);
        let y: Vec<f64> = (0..30).map(|i| (i % 5) as f64 / 5.0).collect();
        let m = train_regressor(&x, &y, &hp(0, 4, 0.1, 1, 1.0)).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.predict_value(&[0.5, 0.5]).unwrap(), m.base_scores[0]);
    }

    #[test]
    fn regression_loss_is_monotone_and_predictions_clamped() {
        let x = wavy(400, 5);
        let y: Vec<f64> = x.rows().map(|r| ((r[0] + r[1] * r[2]) * 0.9).min(1.0)).collect();
        let m = train_regressor(&x, &y, &hp(60, 4, 0.3, 5, 1.0)).unwrap();
        assert_eq!(m.train_loss.len(), 61);
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.train_loss[60] < 0.2 * m.train_loss[0]);
        for r in x.rows().take(50) {
            let p = m.predict_value(r).unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(m.raw_scores(r).unwrap(), walk_oracle(&m, r));
        }
        assert!(m.predict_value(&[1.0; 4]).is_err());
    }

    #[test]
    fn separable_classes_reach_full_training_accuracy() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..100).map(|i| (i >= 40) as usize).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = train_classifier(&x, &labels, 2, &hp(10, 4, 0.1, 20, 1.0)).unwrap();
        for (r, &c) in x.rows().zip(&labels) {
            assert_eq!(m.predict_class(r).unwrap(), c);
            let p = m.predict_proba(r).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn classification_loss_is_monotone_three_classes() {
        let x = wavy(300, 4);
        let labels: Vec<usize> = x
            .rows()
            .enumerate()
            .map(|(i, r)| if i % 17 == 0 { 2 } else if r[0] + r[1] > 1.0 { 1 } else if r[2] > 0.7 { 2 } else { 0 })
            .collect();
        let m = train_classifier(&x, &labels, 3, &hp(200, 4, 0.1, 5, 1.0)).unwrap();
        assert_eq!(m.trees.len(), 600);
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0]), "{:?}", m.train_loss);
        for r in x.rows().take(20) {
            let s = m.raw_scores(r).unwrap();
            assert_eq!(s, walk_oracle(&m, r));
        }
    }

    #[test]
    fn class_permutation_permutes_probabilities() {
        let x = wavy(120, 3);
        let labels: Vec<usize> = x.rows().map(|r| if r[0] < 0.3 { 0 } else if r[1] < 0.5 { 1 } else { 2 }).collect();
        let perm = [2usize, 0, 1];
        let permuted: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let hp = hp(15, 3, 0.2, 5, 1.0);
        let a = train_classifier(&x, &labels, 3, &hp).unwrap();
        let b = train_classifier(&x, &permuted, 3, &hp).unwrap();
        for r in x.rows().take(30) {
            let pa = a.predict_proba(r).unwrap();
            let pb = b.predict_proba(r).unwrap();
            for k in 0..3 {
                assert!((pa[k] - pb[perm[k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_permutation_equivariance() {
        let x = wavy(150, 4);
        let y: Vec<f64> = x.rows().map(|r| r[1] * 0.5 + r[3] * 0.4).collect();
        let perm = [3usize, 0, 2, 1]; // new column j holds old column perm[j]
        let rows_p: Vec<Vec<f64>> = x.rows().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let xp = Matrix::from_rows(&rows_p).unwrap();
        let hp = hp(20, 3, 0.3, 5, 1.0);
        let a = train_regressor(&x, &y, &hp).unwrap();
        let mut b = a.clone();
        for t in &mut b.trees {
            for n in &mut t.nodes {
                if let Node::Split { feature, .. } = n {
                    *feature = perm.iter().position(|&j| j == *feature).unwrap();
                }
            }
        }
        for (r, rp) in x.rows().zip(xp.rows()) {
            assert_eq!(a.predict_value(r).unwrap(), b.predict_value(rp).unwrap());
        }
    }

    #[test]
    fn errors() {
        let x = wavy(10, 2);
        assert!(train_regressor(&Matrix::new(0, 2, vec![]).unwrap(), &[], &Hyperparameters::default()).is_err());
        assert!(train_regressor(&x, &[0.0; 9], &Hyperparameters::default()).is_err());
        assert!(matches!(
            train_classifier(&x, &[1; 10], 2, &Hyperparameters::default()),
            Err(Error::InsufficientData(_))
        ));
        let bad = Hyperparameters {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(train_regressor(&x, &[0.0; 10], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x = wavy(80, 3);
        let labels: Vec<usize> = x.rows().map(|r| (r[0] > 0.5) as usize).collect();
        let m = train_classifier(&x, &labels, 2, &hp(5, 3, 0.1, 5, 1.0)).unwrap();
        let back: BoostedModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn seeded_training_is_bitwise_reproducible() {
        let x = wavy(200, 4);
        let y: Vec<f64> = x.rows().map(|r| r[2]).collect();
        let a = train_regressor(&x, &y, &hp(10, 4, 0.1, 5, 1.0)).unwrap();
        let b = train_regressor(&x, &y, &hp(10, 4, 0.1, 5, 1.0)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
