//! Harmonic regression basis and the penalized least-squares solver.
//!
//! The model for one band is
//! `y(t) = b0 + b1 * t/365.25 + sum_k (a_k cos(k w t) + c_k sin(k w t))`, `k = 1..3`,
//! `w = 2 pi / 365.25`, fitted by minimizing `sum (y - x.b)^2 + lambda * sum_{j>=1} |b_j|`.
//!
//! The solver works on mean-centered regressors, which is an exact reparametrization
//! when the intercept is unpenalized: the slope column is otherwise nearly collinear
//! with the intercept for day counts far from the epoch and coordinate descent crawls.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: f64 = 365.25;
pub const N_COEFFS: usize = 8;
const N_PEN: usize = N_COEFFS - 1;

/// Coordinate-descent stopping rule: max coefficient change below this...
pub const CD_TOLERANCE: f64 = 1e-10;
/// ...or this many full sweeps.
pub const CD_MAX_SWEEPS: usize = 1000;

/// Relative pivot below which a centered Gram matrix is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Regressors `[1, t/365.25, cos wt, sin wt, cos 2wt, sin 2wt, cos 3wt, sin 3wt]`.
pub fn design_row(t: f64) -> [f64; N_COEFFS] {
    let cycles = t / DAYS_PER_YEAR;
    // reduce the argument before the trig calls; t is thousands of days
    let phase = (cycles - cycles.floor()) * TAU;
    let (s1, c1) = phase.sin_cos();
    let (s2, c2) = (2.0 * phase).sin_cos();
    let (s3, c3) = (3.0 * phase).sin_cos();
    [1.0, cycles, c1, s1, c2, s2, c3, s3]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HarmonicModel {
    /// intercept, slope (per year), cos1, sin1, cos2, sin2, cos3, sin3
    pub coeffs: [f64; N_COEFFS],
    pub rmse: f64,
}

impl HarmonicModel {
    pub fn predict(&self, t: f64) -> f64 {
        dot(&design_row(t), &self.coeffs)
    }

    pub fn predict_row(&self, row: &[f64; N_COEFFS]) -> f64 {
        dot(row, &self.coeffs)
    }
}

fn dot(a: &[f64; N_COEFFS], b: &[f64; N_COEFFS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Centered normal equations shared by every band fitted on the same observation times.
#[derive(Debug, Clone)]
pub(crate) struct CenteredDesign {
    n: usize,
    mean: [f64; N_PEN],
    gram: [[f64; N_PEN]; N_PEN],
}

impl CenteredDesign {
    pub(crate) fn new(rows: &[[f64; N_COEFFS]]) -> Self {
        let n = rows.len();
        let mut mean = [0.0; N_PEN];
        for row in rows {
            for j in 0..N_PEN {
                mean[j] += row[j + 1];
            }
        }
        if n > 0 {
            for m in &mut mean {
                *m /= n as f64;
            }
        }
        let mut gram = [[0.0; N_PEN]; N_PEN];
        for row in rows {
            let mut centered = [0.0; N_PEN];
            for j in 0..N_PEN {
                centered[j] = row[j + 1] - mean[j];
            }
            for j in 0..N_PEN {
                for k in j..N_PEN {
                    gram[j][k] += centered[j] * centered[k];
                }
            }
        }
        for j in 0..N_PEN {
            for k in 0..j {
                gram[j][k] = gram[k][j];
            }
        }
        CenteredDesign { n, mean, gram }
    }

    /// Cholesky-style elimination; fails when any column is (numerically) explained by
    /// the ones before it.
    pub(crate) fn check_full_rank(&self) -> Result<()> {
        let mut l = [[0.0; N_PEN]; N_PEN];
        for j in 0..N_PEN {
            let diag = self.gram[j][j];
            let mut d = diag;
            for k in 0..j {
                d -= l[j][k] * l[j][k];
            }
            if !(diag > 0.0) || d <= RANK_TOLERANCE * diag {
                return Err(Error::Singular(format!(
                    "regressor {} is collinear with the others",
                    j + 1
                )));
            }
            l[j][j] = d.sqrt();
            for i in j + 1..N_PEN {
                let mut s = self.gram[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / l[j][j];
            }
        }
        Ok(())
    }

    /// Cyclic coordinate descent on the centered problem, then the intercept and rmse.
    pub(crate) fn solve(&self, rows: &[[f64; N_COEFFS]], ys: &[f64], lambda: f64) -> HarmonicModel {
        debug_assert_eq!(rows.len(), ys.len());
        let n = self.n as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let mut cross = [0.0; N_PEN];
        for (row, &y) in rows.iter().zip(ys) {
            let yc = y - y_mean;
            for j in 0..N_PEN {
                cross[j] += (row[j + 1] - self.mean[j]) * yc;
            }
        }

        let half_lambda = 0.5 * lambda;
        let mut beta = [0.0; N_PEN];
        for _ in 0..CD_MAX_SWEEPS {
            let mut max_delta: f64 = 0.0;
            for j in 0..N_PEN {
                let diag = self.gram[j][j];
                let updated = if diag > 0.0 {
                    let mut rho = cross[j];
                    for k in 0..N_PEN {
                        if k != j {
                            rho -= self.gram[j][k] * beta[k];
                        }
                    }
                    soft_threshold(rho, half_lambda) / diag
                } else {
                    0.0
                };
                max_delta = max_delta.max((updated - beta[j]).abs());
                beta[j] = updated;
            }
            if max_delta < CD_TOLERANCE {
                break;
            }
        }

        let mut coeffs = [0.0; N_COEFFS];
        coeffs[0] = y_mean - beta.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        coeffs[1..].copy_from_slice(&beta);
        let sse: f64 = rows
            .iter()
            .zip(ys)
            .map(|(row, &y)| {
                let r = y - dot(row, &coeffs);
                r * r
            })
            .sum();
        HarmonicModel {
            coeffs,
            rmse: (sse / n).sqrt(),
        }
    }
}

/// Fits one band's harmonic model to `(time, value)` pairs.
///
/// `lambda = 0` is ordinary least squares and requires a full-rank design.
pub fn fit_harmonic(ts: &[(f64, f64)], lambda: f64) -> Result<HarmonicModel> {
    if ts.len() < N_COEFFS {
        return Err(Error::InsufficientData(format!(
            "need at least {N_COEFFS} observations, got {}",
            ts.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if ts.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::Data("non-finite observation".into()));
    }
    if ts.iter().all(|(t, _)| *t == ts[0].0) {
        return Err(Error::InvalidArgument("all observation times are identical".into()));
    }
    let rows: Vec<_> = ts.iter().map(|(t, _)| design_row(*t)).collect();
    let ys: Vec<f64> = ts.iter().map(|(_, y)| *y).collect();
    let design = CenteredDesign::new(&rows);
    if lambda == 0.0 {
        design.check_full_rank()?;
    }
    Ok(design.solve(&rows, &ys, lambda))
}

/// Value of the penalized objective for `coeffs` on `ts`.
pub fn lasso_objective(ts: &[(f64, f64)], coeffs: &[f64; N_COEFFS], lambda: f64) -> f64 {
    let sse: f64 = ts
        .iter()
        .map(|(t, y)| {
            let r = y - dot(&design_row(*t), coeffs);
            r * r
        })
        .sum();
    sse + lambda * coeffs[1..].iter().map(|b| b.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn design_row_phases() {
        assert_eq!(design_row(0.0), [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(close(&design_row(365.25), &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 1e-9));
        let q = design_row(365.25 / 4.0);
        assert!(close(&q[2..], &[0.0, 1.0, -1.0, 0.0, 0.0, -1.0], 1e-9));
    }

    #[test]
    fn design_row_matches_naive_trig_near_epoch() {
        for t in [-400.0, 12.5, 1000.0, 9000.25] {
            let w = TAU / DAYS_PER_YEAR;
            let naive = [
                1.0,
                t / DAYS_PER_YEAR,
                (w * t).cos(),
                (w * t).sin(),
                (2.0 * w * t).cos(),
                (2.0 * w * t).sin(),
                (3.0 * w * t).cos(),
                (3.0 * w * t).sin(),
            ];
            assert!(close(&design_row(t), &naive, 1e-9), "t={t}");
        }
    }

    fn monthly(start: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| start + i as f64 * DAYS_PER_YEAR / 12.0).collect()
    }

    #[test]
    fn constant_series() {
        let ts: Vec<_> = monthly(9000.0, 24).into_iter().map(|t| (t, 0.25)).collect();
        let m = fit_harmonic(&ts, 0.0).unwrap();
        assert!((m.coeffs[0] - 0.25).abs() < 1e-12);
        assert!(m.coeffs[1..].iter().all(|b| b.abs() < 1e-12));
        assert!(m.rmse < 1e-12);
    }

    #[test]
    fn noiseless_recovery() {
        let truth = [0.12, 0.004, 0.03, -0.02, 0.01, 0.005, -0.004, 0.002];
        let ts: Vec<_> = monthly(9500.0, 50)
            .into_iter()
            .map(|t| (t, dot(&design_row(t), &truth)))
            .collect();
        let m = fit_harmonic(&ts, 0.0).unwrap();
        assert!(close(&m.coeffs, &truth, 1e-6), "{:?}", m.coeffs);
    }

    #[test]
    fn huge_lambda_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts: Vec<_> = monthly(9500.0, 40)
            .into_iter()
            .map(|t| (t, 0.2 + 0.05 * design_row(t)[3] + rng.random_range(-0.01..0.01)))
            .collect();
        let mean = ts.iter().map(|p| p.1).sum::<f64>() / ts.len() as f64;
        let m = fit_harmonic(&ts, 1e6).unwrap();
        assert!(m.coeffs[1..].iter().all(|&b| b == 0.0));
        assert!((m.coeffs[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let few: Vec<_> = (0..7).map(|i| (i as f64, 0.1)).collect();
        assert!(matches!(fit_harmonic(&few, 0.0), Err(Error::InsufficientData(_))));
        let same: Vec<_> = (0..10).map(|_| (5.0, 0.1)).collect();
        assert!(fit_harmonic(&same, 0.0).is_err());
        // observations exactly one year apart: every harmonic column is constant
        let yearly: Vec<_> = (0..10).map(|i| (i as f64 * DAYS_PER_YEAR, 0.1 * i as f64)).collect();
        assert!(matches!(fit_harmonic(&yearly, 0.0), Err(Error::Singular(_))));
        // the penalized problem is still solvable
        assert!(fit_harmonic(&yearly, 0.1).is_ok());
        let ts: Vec<_> = monthly(0.0, 12).into_iter().map(|t| (t, 0.1)).collect();
        assert!(fit_harmonic(&ts, -1.0).is_err());
    }

    /// Direct normal-equations solve on the raw (uncentered) design.
    fn normal_equations(ts: &[(f64, f64)]) -> Vec<f64> {
        let x = DMatrix::from_fn(ts.len(), N_COEFFS, |i, j| design_row(ts[i].0)[j]);
        let y = DVector::from_iterator(ts.len(), ts.iter().map(|p| p.1));
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        xtx.lu().solve(&xty).unwrap().iter().copied().collect()
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = rng.random_range(12..80);
            let start = rng.random_range(-1000.0..3000.0);
            let ts: Vec<_> = (0..n)
                .map(|i| {
                    let t = start + i as f64 * rng.random_range(8.0..40.0);
                    (t, rng.random_range(0.0..0.4))
                })
                .collect();
            let m = fit_harmonic(&ts, 0.0).unwrap();
            let direct = normal_equations(&ts);
            assert!(close(&m.coeffs, &direct, 1e-8), "trial {trial}: {:?} vs {direct:?}", m.coeffs);
        }
    }

    #[test]
    fn objective_never_worse_than_zero_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let ts: Vec<_> = monthly(9000.0, 30)
                .into_iter()
                .map(|t| (t, rng.random_range(0.0..0.3)))
                .collect();
            let lambda = rng.random_range(0.0..2.0);
            let m = fit_harmonic(&ts, lambda).unwrap();
            let mean = ts.iter().map(|p| p.1).sum::<f64>() / ts.len() as f64;
            let mut zero = [0.0; N_COEFFS];
            zero[0] = mean;
            assert!(lasso_objective(&ts, &m.coeffs, lambda) <= lasso_objective(&ts, &zero, lambda) + 1e-12);
            let origin = [0.0; N_COEFFS];
            assert!(lasso_objective(&ts, &m.coeffs, lambda) <= lasso_objective(&ts, &origin, lambda) + 1e-12);
        }
    }

    #[test]
    fn shrinkage_is_monotone_for_a_single_active_predictor() {
        // a pure annual cosine over whole years: the cos1 column is orthogonal to the rest
        let ts: Vec<_> = monthly(0.0, 48)
            .into_iter()
            .map(|t| (t, 0.1 + 0.05 * design_row(t)[2]))
            .collect();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0, 4.0] {
            let b = fit_harmonic(&ts, lambda).unwrap().coeffs[2].abs();
            assert!(b <= last + 1e-12, "lambda {lambda}: {b} > {last}");
            last = b;
        }
        assert_eq!(last, 0.0);
    }
}
