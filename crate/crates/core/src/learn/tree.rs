//! Regression trees on gradient statistics, grown level by level with exact greedy splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::Length(format!(
                "{} values for a {n_rows}x{n_cols} matrix",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value {v}")));
        }
        Ok(Matrix { n_rows, n_cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::Length(format!("row {i} has {} features, expected {n_cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), n_cols, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols.max(1)).take(self.n_rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// One tree. Samples with `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Output column the tree contributes to (the class for classifiers, 0 otherwise).
    pub class: usize,
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { .. } => return k,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Checks child indices, feature indices and leaf values.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("tree without nodes".into()));
        }
        for (k, n) in self.nodes.iter().enumerate() {
            match *n {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::Format(format!("non-finite leaf value at node {k}")))
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= n_features
                        || !threshold.is_finite()
                        || left <= k
                        || right <= k
                        || left >= self.nodes.len()
                        || right >= self.nodes.len()
                    {
                        return Err(Error::Format(format!("malformed split at node {k}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub l2: f64,
    pub learning_rate: f64,
}

/// Second-order split gain.
#[inline]
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, l2: f64) -> f64 {
    let g = gl + gr;
    gl * gl / (hl + l2) + gr * gr / (hr + l2) - g * g / (hl + hr + l2)
}

/// Threshold strictly above `lo` and at most `hi`, so that `lo` goes left and `hi` right.
#[inline]
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo {
        m
    } else {
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

impl SplitCandidate {
    /// Max gain, then lowest feature, then lowest threshold.
    fn better_than(&self, other: &Option<SplitCandidate>) -> bool {
        match other {
            None => true,
            Some(o) => {
                self.gain > o.gain
                    || (self.gain == o.gain
                        && (self.feature < o.feature || (self.feature == o.feature && self.threshold < o.threshold)))
            }
        }
    }
}

/// Running left-side statistics of one node during a sorted column scan.
#[derive(Clone, Copy)]
struct ScanState {
    g: f64,
    h: f64,
    count: usize,
    last: f64,
    best: Option<(f64, f64)>,
}

impl ScanState {
    const EMPTY: ScanState = ScanState {
        g: 0.0,
        h: 0.0,
        count: 0,
        last: f64::NAN,
        best: None,
    };

    /// Offers the boundary before value `v`, then absorbs the sample.
    #[inline]
    fn push(&mut self, v: f64, g: f64, h: f64, total: &NodeStats, min_leaf: usize, l2: f64) {
        if self.count >= min_leaf && v != self.last && total.count - self.count >= min_leaf {
            let (gr, hr) = (total.g - self.g, total.h - self.h);
            let gain = self.g * self.g / (self.h + l2) + gr * gr / (hr + l2) - total.parent_term;
            if gain > 0.0 && self.best.is_none_or(|(bg, _)| gain > bg) {
                self.best = Some((gain, midpoint(self.last, v)));
            }
        }
        self.g += g;
        self.h += h;
        self.count += 1;
        self.last = v;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeStats {
    g: f64,
    h: f64,
    count: usize,
    /// `g² / (h + l2)`, the last term of the split gain.
    parent_term: f64,
}

impl NodeStats {
    fn finish(mut self, l2: f64) -> Self {
        self.parent_term = self.g * self.g / (self.h + l2);
        self
    }
}

/// Best split of one node on one feature: `(threshold, gain)`, or `None` when no split
/// with positive gain leaves `min_samples_leaf` samples on both sides.
pub fn best_split(values: &[f64], gradients: &[f64], hessians: &[f64], min_samples_leaf: usize, l2: f64) -> Option<(f64, f64)> {
    assert!(values.len() == gradients.len() && values.len() == hessians.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total = NodeStats {
        g: gradients.iter().sum(),
        h: hessians.iter().sum(),
        count: values.len(),
        parent_term: 0.0,
    }
    .finish(l2);
    let mut st = ScanState::EMPTY;
    for &i in &order {
        st.push(values[i], gradients[i], hessians[i], &total, min_samples_leaf.max(1), l2);
    }
    st.best.map(|(gain, thr)| (thr, gain))
}

/// Feature columns sorted once per training set.
#[derive(Debug, Clone)]
pub struct SortedColumns {
    columns: Vec<Vec<(f64, u32)>>,
}

impl SortedColumns {
    pub fn new(x: &Matrix) -> Self {
        let columns = (0..x.n_cols())
            .into_par_iter()
            .map(|j| {
                let mut col: Vec<(f64, u32)> = (0..x.n_rows()).map(|i| (x.get(i, j), i as u32)).collect();
                col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                col
            })
            .collect();
        SortedColumns { columns }
    }
}

const NO_SLOT: u32 = u32::MAX;

/// Grows one tree on gradients `g` and hessians `h`. Returns the tree and the leaf node
/// index of every training sample.
pub fn grow_tree(
    x: &Matrix,
    cols: &SortedColumns,
    g: &[f64],
    h: &[f64],
    p: &SplitParams,
    class: usize,
) -> (Tree, Vec<usize>) {
    let n = x.n_rows();
    let min_leaf = p.min_samples_leaf.max(1);
    // slot of each sample among the nodes open at the current level
    let mut slot_of = vec![0u32; n];
    let mut leaf_of = vec![0usize; n];
    let root = NodeStats {
        g: g.iter().sum(),
        h: h.iter().sum(),
        count: n,
        parent_term: 0.0,
    }
    .finish(p.l2);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // (tree node index, stats) of open nodes
    let mut open: Vec<(usize, NodeStats)> = vec![(0, root)];
    let mut depth = 0;

    while !open.is_empty() {
        let splits: Vec<Option<SplitCandidate>> = if depth < p.max_depth {
            let packed: Vec<Packed> = (0..n)
                .map(|i| Packed {
                    g: g[i],
                    h: h[i],
                    slot: slot_of[i],
                })
                .collect();
            find_splits(cols, &packed, &open, min_leaf, p.l2)
        } else {
            vec![None; open.len()]
        };

        let mut next_open = Vec::new();
        // child slot pair per open slot, NO_SLOT when it became a leaf
        let mut child_slots = vec![(NO_SLOT, NO_SLOT, 0usize, 0.0f64); open.len()];
        for (s, ((node_idx, stats), split)) in open.iter().zip(&splits).enumerate() {
            match split {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[*node_idx] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    child_slots[s] = (next_open.len() as u32, next_open.len() as u32 + 1, c.feature, c.threshold);
                    next_open.push((left, NodeStats::default()));
                    next_open.push((left + 1, NodeStats::default()));
                }
                None => {
                    nodes[*node_idx] = Node::Leaf {
                        value: -stats.g / (stats.h + p.l2) * p.learning_rate,
                    };
                }
            }
        }

        for i in 0..n {
            let s = slot_of[i];
            if s == NO_SLOT {
                continue;
            }
            let (l, r, feature, threshold) = child_slots[s as usize];
            if l == NO_SLOT {
                leaf_of[i] = open[s as usize].0;
                slot_of[i] = NO_SLOT;
            } else {
                let c = if x.get(i, feature) < threshold { l } else { r };
                slot_of[i] = c;
                let st = &mut next_open[c as usize].1;
                st.g += g[i];
                st.h += h[i];
                st.count += 1;
            }
        }
        open = next_open.into_iter().map(|(k, st)| (k, st.finish(p.l2))).collect();
        depth += 1;
    }
    (Tree { class, nodes }, leaf_of)
}

/// Per-sample scan inputs kept together so each sorted-order lookup touches one line.
#[derive(Clone, Copy)]
struct Packed {
    g: f64,
    h: f64,
    slot: u32,
}

fn find_splits(
    cols: &SortedColumns,
    packed: &[Packed],
    open: &[(usize, NodeStats)],
    min_leaf: usize,
    l2: f64,
) -> Vec<Option<SplitCandidate>> {
    let per_feature: Vec<Vec<Option<SplitCandidate>>> = cols
        .columns
        .par_iter()
        .enumerate()
        .map(|(feature, col)| {
            let mut states = vec![ScanState::EMPTY; open.len()];
            for &(v, i) in col {
                let pk = packed[i as usize];
                if pk.slot == NO_SLOT {
                    continue;
                }
                let s = pk.slot as usize;
                states[s].push(v, pk.g, pk.h, &open[s].1, min_leaf, l2);
            }
            states
                .iter()
                .map(|st| {
                    st.best.map(|(gain, threshold)| SplitCandidate {
                        feature,
                        threshold,
                        gain,
                    })
                })
                .collect()
        })
        .collect();

    (0..open.len())
        .map(|s| {
            let mut best: Option<SplitCandidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[s] {
                    if c.better_than(&best) {
                        best = Some(c);
                    }
                }
            }
            best
        })
        .collect()
}
