//! Synthetic minority oversampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SMOTE_K: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other samples of each sample (Euclidean, ties by index).
fn neighbors(samples: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..samples.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..samples.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&samples[i], &samples[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// `n_synthetic` points, each `x_i + u (x_nn - x_i)` with `u ~ U[0, 1)` and `x_nn` one of
/// the `k` nearest minority neighbours of `x_i`. Base samples are taken round-robin. A
/// single-sample minority is copied.
pub fn smote(samples: &[Vec<f64>], k: usize, n_synthetic: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_synthetic == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("SMOTE needs at least one minority sample".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("SMOTE k must be >= 1".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Length("SMOTE samples differ in length".into()));
    }
    if samples.len() == 1 {
        return Ok(vec![samples[0].clone(); n_synthetic]);
    }
    let nn = neighbors(samples, k.min(samples.len() - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_synthetic)
        .map(|j| {
            let i = j % samples.len();
            let other = &samples[nn[i][rng.random_range(0..nn[i].len())]];
            let u: f64 = rng.random();
            samples[i].iter().zip(other).map(|(a, b)| a + u * (b - a)).collect()
        })
        .collect())
}

/// Appends SMOTE samples to every class smaller than the largest one until all class
/// counts are equal. Classes without samples stay empty.
pub fn oversample_to_majority(
    rows: &mut Vec<Vec<f64>>,
    labels: &mut Vec<usize>,
    n_classes: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let mut counts = vec![0usize; n_classes];
    for &c in labels.iter() {
        counts[c] += 1;
    }
    let majority = counts.iter().copied().max().unwrap_or(0);
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == majority {
            continue;
        }
        let members: Vec<Vec<f64>> = rows
            .iter()
            .zip(labels.iter())
            .filter(|(_, &c)| c == class)
            .map(|(r, _)| r.clone())
            .collect();
        let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64 + 1);
        let synthetic = smote(&members, k, majority - count, sub_seed)?;
        labels.extend(std::iter::repeat_n(class, synthetic.len()));
        rows.extend(synthetic);
    }
    Ok(())
}
