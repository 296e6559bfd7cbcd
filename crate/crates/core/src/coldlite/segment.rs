//! Sequential segmentation of a pixel's time series into stable periods.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::harmonic::{design_row, CenteredDesign, HarmonicModel, N_COEFFS};
use crate::error::{Error, Result};
use crate::spectral::{self, INVALID};
use crate::stack::{SceneStack, N_BANDS};

pub const N_FEATURES: usize = N_BANDS * N_COEFFS;

/// Lower bound on the per-band rmse used to normalize residuals.
pub const RMSE_FLOOR: f64 = 1e-4;

/// Below this many fitted observations the monitoring model is refit after every
/// accepted observation; above it, once the count has grown by a third.
const REFIT_EVERY_OBS_BELOW: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColdConfig {
    pub lambda: f64,
    pub min_obs: usize,
    pub min_span_days: f64,
    pub conse: usize,
    pub chi2_threshold: f64,
    pub test_bands: Vec<usize>,
}

impl Default for ColdConfig {
    fn default() -> Self {
        ColdConfig {
            lambda: 0.2,
            min_obs: 16,
            min_span_days: 365.0,
            conse: 4,
            // 99th percentile of chi-square with 5 degrees of freedom
            chi2_threshold: 15.09,
            test_bands: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ColdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.min_obs < N_COEFFS {
            return bad(format!("min_obs must be >= {N_COEFFS}, got {}", self.min_obs));
        }
        if self.conse < 1 {
            return bad("conse must be >= 1".into());
        }
        if !(self.min_span_days >= 0.0) {
            return bad(format!("min_span_days must be >= 0, got {}", self.min_span_days));
        }
        if !(self.chi2_threshold > 0.0) {
            return bad(format!("chi2_threshold must be > 0, got {}", self.chi2_threshold));
        }
        if self.test_bands.is_empty() || self.test_bands.iter().any(|&b| b >= N_BANDS) {
            return bad(format!("test_bands must be non-empty band indices, got {:?}", self.test_bands));
        }
        Ok(())
    }
}

/// One acquisition of one pixel. Invalid reflectances are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub refl: [f64; N_BANDS],
    /// 0 land, 1 water, 255 invalid
    pub water: u8,
}

impl Observation {
    pub fn is_valid(&self) -> bool {
        self.refl.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSeries {
    pub x: usize,
    pub y: usize,
    pub obs: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub models: [HarmonicModel; N_BANDS],
    pub n_obs: usize,
    pub ended_by_break: bool,
    pub break_time: Option<f64>,
}

impl Segment {
    /// Band-major coefficients: band 0 coeffs[0..8], band 1 coeffs[0..8], ...
    pub fn export_features(&self) -> Vec<f64> {
        export_features(&self.models)
    }

    pub fn change_score(&self, ob: &Observation, test_bands: &[usize]) -> Option<f64> {
        change_score(&self.models, ob, test_bands)
    }
}

pub fn export_features(models: &[HarmonicModel; N_BANDS]) -> Vec<f64> {
    models.iter().flat_map(|m| m.coeffs).collect()
}

/// Sum over test bands of squared residuals normalized by the band rmse.
/// `None` if the observation is invalid in any test band.
pub fn change_score(models: &[HarmonicModel; N_BANDS], ob: &Observation, test_bands: &[usize]) -> Option<f64> {
    score_row(models, &design_row(ob.t), &ob.refl, test_bands)
}

fn score_row(
    models: &[HarmonicModel; N_BANDS],
    row: &[f64; N_COEFFS],
    refl: &[f64; N_BANDS],
    test_bands: &[usize],
) -> Option<f64> {
    let mut score = 0.0;
    for &b in test_bands {
        let v = refl[b];
        if !v.is_finite() {
            return None;
        }
        let z = (v - models[b].predict_row(row)) / models[b].rmse.max(RMSE_FLOOR);
        score += z * z;
    }
    Some(score)
}

fn fit_models(rows: &[[f64; N_COEFFS]], refl: &[[f64; N_BANDS]], idx: &[usize], lambda: f64) -> [HarmonicModel; N_BANDS] {
    let sub_rows: Vec<_> = idx.iter().map(|&i| rows[i]).collect();
    let design = CenteredDesign::new(&sub_rows);
    let mut ys = vec![0.0; idx.len()];
    std::array::from_fn(|b| {
        for (y, &i) in ys.iter_mut().zip(idx) {
            *y = refl[i][b];
        }
        design.solve(&sub_rows, &ys, lambda)
    })
}

/// Splits a pixel's valid observations into stable periods.
///
/// Each period starts from the first `min_obs` valid observations spanning at least
/// `min_span_days`. Later observations are scored against the current model; a run of
/// `conse` consecutive scores above the threshold confirms a break at the first of
/// them, and that run opens the next period. Shorter anomalous runs are dropped as
/// outliers. The monitoring model is refit as observations accumulate, and every
/// emitted segment carries a final fit over all its accepted observations.
pub fn segment_series(series: &PixelSeries, cfg: &ColdConfig) -> Vec<Segment> {
    let valid: Vec<&Observation> = series.obs.iter().filter(|o| o.is_valid()).collect();
    let n = valid.len();
    let times: Vec<f64> = valid.iter().map(|o| o.t).collect();
    let rows: Vec<_> = times.iter().map(|&t| design_row(t)).collect();
    let refl: Vec<[f64; N_BANDS]> = valid.iter().map(|o| o.refl).collect();

    let mut segments = Vec::new();
    let mut cursor = 0;
    while n - cursor >= cfg.min_obs {
        let mut end = cursor + cfg.min_obs;
        while end <= n && times[end - 1] - times[cursor] < cfg.min_span_days {
            end += 1;
        }
        if end > n {
            break;
        }
        let mut accepted: Vec<usize> = (cursor..end).collect();
        let mut models = fit_models(&rows, &refl, &accepted, cfg.lambda);
        let mut fitted_on = accepted.len();
        let mut anomalies: Vec<usize> = Vec::with_capacity(cfg.conse);
        let mut break_at = None;

        for j in end..n {
            let score = score_row(&models, &rows[j], &refl[j], &cfg.test_bands).unwrap_or(0.0);
            if score > cfg.chi2_threshold {
                anomalies.push(j);
                if anomalies.len() == cfg.conse {
                    break_at = Some(anomalies[0]);
                    break;
                }
                continue;
            }
            anomalies.clear();
            accepted.push(j);
            if accepted.len() < REFIT_EVERY_OBS_BELOW || 3 * accepted.len() >= 4 * fitted_on {
                models = fit_models(&rows, &refl, &accepted, cfg.lambda);
                fitted_on = accepted.len();
            }
        }

        if fitted_on != accepted.len() {
            models = fit_models(&rows, &refl, &accepted, cfg.lambda);
        }
        let last = *accepted.last().expect("non-empty window");
        segments.push(Segment {
            t_start: times[cursor],
            t_end: times[last],
            models,
            n_obs: accepted.len(),
            ended_by_break: break_at.is_some(),
            break_time: break_at.map(|b| times[b]),
        });
        match break_at {
            Some(b) => cursor = b,
            None => break,
        }
    }
    segments
}

/// Serialized form of one segment, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub x: usize,
    pub y: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub n_obs: usize,
    pub ended_by_break: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub break_time: Option<f64>,
    pub features: Vec<f64>,
    pub rmse: Vec<f64>,
}

impl SegmentRecord {
    pub fn from_segment(x: usize, y: usize, seg: &Segment) -> Self {
        SegmentRecord {
            x,
            y,
            t_start: seg.t_start,
            t_end: seg.t_end,
            n_obs: seg.n_obs,
            ended_by_break: seg.ended_by_break,
            break_time: seg.break_time,
            features: seg.export_features(),
            rmse: seg.models.iter().map(|m| m.rmse).collect(),
        }
    }

    pub fn models(&self) -> Result<[HarmonicModel; N_BANDS]> {
        if self.features.len() != N_FEATURES || self.rmse.len() != N_BANDS {
            return Err(Error::Length(format!(
                "segment record needs {N_FEATURES} features and {N_BANDS} rmse values"
            )));
        }
        Ok(std::array::from_fn(|b| HarmonicModel {
            coeffs: self.features[b * N_COEFFS..(b + 1) * N_COEFFS].try_into().unwrap(),
            rmse: self.rmse[b],
        }))
    }

    /// Exclusive end of the period the segment labels: its break time, or open-ended.
    pub fn label_end(&self) -> f64 {
        self.break_time.unwrap_or(f64::INFINITY)
    }
}

/// Builds the observation series of pixel `(x, y)`. QA-flagged and nodata samples are
/// invalid; the water flag comes from the MNDWI of the clear observations.
pub fn pixel_series(stack: &SceneStack, x: usize, y: usize, mndwi_threshold: f64) -> PixelSeries {
    let obs = stack
        .scenes()
        .iter()
        .map(|scene| {
            let clear = scene.qa.get(x, y) == 0;
            let refl: [f64; N_BANDS] = std::array::from_fn(|b| match scene.bands[b].value(x, y) {
                Some(v) if clear => v as f64,
                _ => f64::NAN,
            });
            let water = if clear {
                spectral::classify_water(spectral::mndwi(refl[1], refl[4]), mndwi_threshold)
            } else {
                INVALID
            };
            Observation {
                t: scene.time_days,
                refl,
                water,
            }
        })
        .collect();
    PixelSeries { x, y, obs }
}

/// Segments every pixel of the stack. Output is in row-major pixel order, then time.
pub fn segment_stack(stack: &SceneStack, cfg: &ColdConfig, mndwi_threshold: f64) -> Vec<SegmentRecord> {
    let (w, h) = (stack.width(), stack.height());
    (0..w * h)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (x, y) = (i % w, i / w);
            let series = pixel_series(stack, x, y, mndwi_threshold);
            segment_series(&series, cfg)
                .into_iter()
                .map(move |s| SegmentRecord::from_segment(x, y, &s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coldlite::harmonic::DAYS_PER_YEAR;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const LAND: [f64; N_BANDS] = [0.05, 0.10, 0.08, 0.30, 0.20, 0.12, 0.32];
    const WATER: [f64; N_BANDS] = [0.08, 0.10, 0.06, 0.04, 0.03, 0.02, 0.30];
    const MONTH: f64 = DAYS_PER_YEAR / 12.0;

    fn series(n: usize, sigma: f64, seed: u64, level: impl Fn(f64) -> [f64; N_BANDS]) -> PixelSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let obs = (0..n)
            .map(|i| {
                let t = 8766.0 + i as f64 * MONTH;
                let base = level(t);
                let refl = std::array::from_fn(|b| base[b] + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 });
                Observation { t, refl, water: 0 }
            })
            .collect();
        PixelSeries { x: 0, y: 0, obs }
    }

    fn models_from(f: impl Fn(usize) -> [f64; N_COEFFS], rmse: f64) -> [HarmonicModel; N_BANDS] {
        std::array::from_fn(|b| HarmonicModel { coeffs: f(b), rmse })
    }

    #[test]
    fn score_zero_on_prediction_and_one_for_one_rmse() {
        let models = models_from(|b| [0.1 * b as f64, 0.01, 0.02, 0.0, 0.0, 0.0, 0.0, 0.0], 0.01);
        let t = 9000.0;
        let mut ob = Observation { t, refl: std::array::from_fn(|b| models[b].predict(t)), water: 0 };
        let bands = ColdConfig::default().test_bands;
        assert!(change_score(&models, &ob, &bands).unwrap().abs() < 1e-18);
        ob.refl[3] += 0.01;
        assert!((change_score(&models, &ob, &bands).unwrap() - 1.0).abs() < 1e-9);
        ob.refl[2] = f64::NAN;
        assert_eq!(change_score(&models, &ob, &bands), None);
        // invalid bands outside the test set do not matter
        ob.refl[2] = 0.0;
        ob.refl[0] = f64::NAN;
        assert!(change_score(&models, &ob, &bands).is_some());
    }

    #[test]
    fn score_is_chi_square_five_under_the_noise_model() {
        let rmse = 0.02;
        let models = models_from(|_| [0.2, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0], rmse);
        let noise = Normal::new(0.0, rmse).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let bands = ColdConfig::default().test_bands;
        let draws = 10_000;
        let mut total = 0.0;
        for k in 0..draws {
            let t = 8000.0 + k as f64;
            let refl = std::array::from_fn(|b| models[b].predict(t) + noise.sample(&mut rng));
            total += change_score(&models, &Observation { t, refl, water: 0 }, &bands).unwrap();
        }
        let mean = total / draws as f64;
        assert!((mean - 5.0).abs() < 0.2, "mean score {mean}");
    }

    #[test]
    fn stable_pixel_is_one_segment() {
        let s = series(96, 0.01, 1, |_| LAND);
        let segs = segment_series(&s, &ColdConfig::default());
        assert_eq!(segs.len(), 1);
        assert!(!segs[0].ended_by_break);
        assert_eq!(segs[0].break_time, None);
        assert!(segs[0].n_obs >= 90);
        assert_eq!(segs[0].t_start, s.obs[0].t);
    }

    #[test]
    fn step_change_gives_two_segments_near_the_step() {
        let t_star = 8766.0 + 50.5 * MONTH;
        let s = series(96, 0.01, 2, |t| if t < t_star { LAND } else { WATER });
        let cfg = ColdConfig::default();
        let segs = segment_series(&s, &cfg);
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert!(segs[0].ended_by_break && !segs[1].ended_by_break);
        let bt = segs[0].break_time.unwrap();
        assert!((bt - t_star).abs() <= cfg.conse as f64 * MONTH);
        assert_eq!(segs[1].t_start, bt);
        assert!(segs[0].t_end < bt);
    }

    #[test]
    fn noiseless_step_uses_the_rmse_floor() {
        let t_star = 8766.0 + 40.5 * MONTH;
        let s = series(96, 0.0, 0, |t| if t < t_star { WATER } else { LAND });
        let segs = segment_series(&s, &ColdConfig { lambda: 0.0, ..Default::default() });
        assert_eq!(segs.len(), 2);
        assert!(segs[0].models.iter().all(|m| m.rmse < 1e-9));
    }

    #[test]
    fn too_few_observations_gives_nothing() {
        let s = series(5, 0.01, 3, |_| LAND);
        assert!(segment_series(&s, &ColdConfig::default()).is_empty());
        let mut s = series(40, 0.01, 3, |_| LAND);
        for ob in s.obs.iter_mut().skip(5) {
            ob.refl[0] = f64::NAN;
        }
        assert!(segment_series(&s, &ColdConfig::default()).is_empty());
    }

    #[test]
    fn segments_are_disjoint_and_inside_the_series() {
        let t1 = 8766.0 + 30.5 * MONTH;
        let t2 = 8766.0 + 70.5 * MONTH;
        let s = series(110, 0.01, 4, |t| if t < t1 || t >= t2 { LAND } else { WATER });
        let cfg = ColdConfig::default();
        let segs = segment_series(&s, &cfg);
        assert_eq!(segs.len(), 3);
        let (first, last) = (s.obs[0].t, s.obs.last().unwrap().t);
        for w in segs.windows(2) {
            assert!(w[0].t_end < w[1].t_start);
            assert_eq!(w[0].break_time, Some(w[1].t_start));
        }
        for seg in &segs {
            assert!(seg.t_start >= first && seg.t_end <= last && seg.t_start < seg.t_end);
            assert!(seg.n_obs >= cfg.min_obs);
            assert!(seg.t_end - seg.t_start >= cfg.min_span_days);
        }
    }

    #[test]
    fn deterministic() {
        let s = series(96, 0.02, 5, |_| LAND);
        let a = segment_series(&s, &ColdConfig::default());
        let b = segment_series(&s, &ColdConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn features_layout_and_reconstruction() {
        let zero = Segment {
            t_start: 0.0,
            t_end: 1.0,
            models: [HarmonicModel::default(); N_BANDS],
            n_obs: 16,
            ended_by_break: false,
            break_time: None,
        };
        assert_eq!(zero.export_features(), vec![0.0; N_FEATURES]);

        let s = series(60, 0.01, 6, |_| LAND);
        let seg = &segment_series(&s, &ColdConfig::default())[0];
        let f = seg.export_features();
        assert_eq!(f.len(), N_FEATURES);
        assert_eq!(f[9], seg.models[1].coeffs[1]);
        let rec = SegmentRecord::from_segment(3, 4, seg);
        let models = rec.models().unwrap();
        for t in [8000.0, 9000.0, 10_000.5] {
            let row = design_row(t);
            for b in 0..N_BANDS {
                let from_features: f64 = (0..N_COEFFS).map(|k| row[k] * f[b * N_COEFFS + k]).sum();
                assert!((from_features - seg.models[b].predict(t)).abs() < 1e-12);
                assert_eq!(models[b], seg.models[b]);
            }
        }
    }

    #[test]
    fn record_json_omits_missing_break_time() {
        let s = series(60, 0.01, 7, |_| LAND);
        let rec = SegmentRecord::from_segment(0, 0, &segment_series(&s, &ColdConfig::default())[0]);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(!json.contains("break_time"));
        let back: SegmentRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn config_validation() {
        assert!(ColdConfig::default().validate().is_ok());
        assert!(ColdConfig { min_obs: 7, ..Default::default() }.validate().is_err());
        assert!(ColdConfig { conse: 0, ..Default::default() }.validate().is_err());
        assert!(ColdConfig { test_bands: vec![9], ..Default::default() }.validate().is_err());
    }
}
