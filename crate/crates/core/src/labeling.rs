//! Water-frequency labels for stable periods and the learning datasets built from them.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::coldlite::{SegmentRecord, N_FEATURES};
use crate::error::{Error, Result};
use crate::grid::ClassGrid;
use crate::spectral::{LAND, WATER};

/// Water-frequency threshold separating land (≤) from water (>).
pub const DEFAULT_WF_THRESHOLD: f64 = 0.25;

/// How observations are averaged into a water frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WfMode {
    /// Water fraction per calendar year, then the unweighted mean over years.
    #[default]
    TwoStage,
    /// Water fraction over all observations at once.
    Pooled,
}

/// UTC calendar year of a time given in days since 1970-01-01.
pub fn calendar_year(t_days: f64) -> i32 {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    let day = t_days.floor() as i64;
    epoch
        .checked_add_signed(chrono::Duration::days(day))
        .map(|d| d.year())
        .unwrap_or(if day < 0 { i32::MIN } else { i32::MAX })
}

/// Water frequency of the observations with `t_start <= t < t_end`.
///
/// States other than land (0) and water (1) are invalid and ignored.
pub fn water_frequency(mask_obs: &[(f64, u8)], t_start: f64, t_end: f64, mode: WfMode) -> Result<f64> {
    let in_window = mask_obs
        .iter()
        .filter(|(t, s)| *t >= t_start && *t < t_end && (*s == LAND || *s == WATER));
    match mode {
        WfMode::TwoStage => {
            let mut per_year: BTreeMap<i32, (u32, u32)> = BTreeMap::new();
            for &(t, s) in in_window {
                let entry = per_year.entry(calendar_year(t)).or_default();
                entry.0 += (s == WATER) as u32;
                entry.1 += 1;
            }
            if per_year.is_empty() {
                return Err(no_valid(t_start, t_end));
            }
            let sum: f64 = per_year.values().map(|&(w, n)| w as f64 / n as f64).sum();
            Ok(sum / per_year.len() as f64)
        }
        WfMode::Pooled => {
            let (mut water, mut total) = (0u32, 0u32);
            for &(_, s) in in_window {
                water += (s == WATER) as u32;
                total += 1;
            }
            if total == 0 {
                return Err(no_valid(t_start, t_end));
            }
            Ok(water as f64 / total as f64)
        }
    }
}

fn no_valid(t_start: f64, t_end: f64) -> Error {
    Error::UndefinedLabel(format!("no valid mask observation in [{t_start}, {t_end})"))
}

/// 1 (water) iff `wf > threshold`.
pub fn binarize_wf(wf: f64, threshold: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&wf) {
        return Err(Error::InvalidArgument(format!("water frequency {wf} outside [0, 1]")));
    }
    Ok((wf > threshold) as u8)
}

/// Time-ordered water masks on one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSeries {
    times: Vec<f64>,
    masks: Vec<ClassGrid>,
}

impl MaskSeries {
    pub fn new(times: Vec<f64>, masks: Vec<ClassGrid>) -> Result<Self> {
        if times.len() != masks.len() || masks.is_empty() {
            return Err(Error::Length(format!(
                "{} times for {} masks",
                times.len(),
                masks.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("mask times must be strictly increasing".into()));
        }
        for (k, m) in masks.iter().enumerate() {
            masks[0].ensure_same_shape(m, &format!("mask {k}"))?;
        }
        Ok(MaskSeries { times, masks })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn masks(&self) -> &[ClassGrid] {
        &self.masks
    }

    pub fn width(&self) -> usize {
        self.masks[0].width()
    }

    pub fn height(&self) -> usize {
        self.masks[0].height()
    }

    /// `(time, state)` pairs of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<(f64, u8)> {
        self.times
            .iter()
            .zip(&self.masks)
            .map(|(&t, m)| (t, m.get(x, y)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub wf: f64,
    pub region_id: u32,
    pub x: usize,
    pub y: usize,
    pub seg_idx: usize,
    pub in_train: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.region_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.wf).collect()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }
}

/// Segments dropped while building a dataset, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub total_segments: usize,
    pub labeled: usize,
    pub no_valid_observation: usize,
    pub skipped: Vec<SkippedSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSegment {
    pub x: usize,
    pub y: usize,
    pub seg_idx: usize,
}

/// Per-pixel index of each record among that pixel's segments (records in input order).
pub fn segment_indices(records: &[SegmentRecord]) -> Vec<usize> {
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let k = seen.entry((r.y, r.x)).or_insert(0);
            *k += 1;
            *k - 1
        })
        .collect()
}

/// Labels every segment with its water frequency over `[t_start, break_time)` (or to the
/// end of the series for an unbroken segment).
pub fn build_dataset(
    records: &[SegmentRecord],
    masks: &MaskSeries,
    region_id: u32,
    training_window: (f64, f64),
    mode: WfMode,
) -> Result<(Dataset, SkipReport)> {
    let mut report = SkipReport {
        total_segments: records.len(),
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(records.len());
    for (rec, seg_idx) in records.iter().zip(segment_indices(records)) {
        if rec.x >= masks.width() || rec.y >= masks.height() {
            return Err(Error::Shape(format!(
                "segment pixel ({}, {}) outside {}x{} mask grid",
                rec.x,
                rec.y,
                masks.width(),
                masks.height()
            )));
        }
        if rec.features.len() != N_FEATURES {
            return Err(Error::Length(format!(
                "segment at ({}, {}) has {} features",
                rec.x,
                rec.y,
                rec.features.len()
            )));
        }
        let end = rec.label_end();
        match water_frequency(&masks.pixel(rec.x, rec.y), rec.t_start, end, mode) {
            Ok(wf) => samples.push(LabeledSample {
                features: rec.features.clone(),
                wf,
                region_id,
                x: rec.x,
                y: rec.y,
                seg_idx,
                in_train: rec.t_start < training_window.1 && end > training_window.0,
            }),
            Err(Error::UndefinedLabel(_)) => {
                report.no_valid_observation += 1;
                report.skipped.push(SkippedSegment {
                    x: rec.x,
                    y: rec.y,
                    seg_idx,
                });
            }
            Err(e) => return Err(e),
        }
    }
    report.labeled = samples.len();
    Ok((Dataset::new(samples), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Grid, NODATA_CLASS};
    use crate::spectral::INVALID;
    use proptest::prelude::*;

    /// Days since epoch of Jan 1 of `year`.
    fn jan1(year: i32) -> f64 {
        let d = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
        (d - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()).num_days() as f64
    }

    #[test]
    fn calendar_years() {
        assert_eq!(calendar_year(0.0), 1970);
        assert_eq!(calendar_year(364.9), 1970);
        assert_eq!(calendar_year(365.0), 1971);
        assert_eq!(calendar_year(-0.5), 1969);
        assert_eq!(calendar_year(jan1(1994)), 1994);
        assert_eq!(calendar_year(jan1(1994) - 0.01), 1993);
    }

    #[test]
    fn two_stage_arithmetic() {
        let a = jan1(1995);
        let b = jan1(1996);
        let obs = vec![
            (a + 10.0, 1),
            (a + 40.0, 1),
            (a + 70.0, 0),
            (a + 100.0, 0),
            (b + 10.0, 1),
            (b + 40.0, 1),
            (b + 70.0, 1),
            (b + 100.0, 1),
        ];
        let wf = water_frequency(&obs, a, b + 365.0, WfMode::TwoStage).unwrap();
        assert_eq!(wf, 0.75);
        let mut uneven = obs.clone();
        uneven.retain(|&(t, _)| t != a + 100.0);
        // (2/3 + 1) / 2 two-stage, 6/7 pooled
        assert!((water_frequency(&uneven, a, f64::INFINITY, WfMode::TwoStage).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((water_frequency(&uneven, a, f64::INFINITY, WfMode::Pooled).unwrap() - 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn all_water_and_all_invalid() {
        let obs: Vec<_> = (0..12).map(|i| (i as f64 * 30.0, WATER)).collect();
        assert_eq!(water_frequency(&obs, 0.0, 1e9, WfMode::TwoStage).unwrap(), 1.0);
        let bad: Vec<_> = (0..12).map(|i| (i as f64 * 30.0, INVALID)).collect();
        assert!(matches!(
            water_frequency(&bad, 0.0, 1e9, WfMode::TwoStage),
            Err(Error::UndefinedLabel(_))
        ));
        // window is half-open
        assert!(water_frequency(&obs, 30.0, 30.0, WfMode::TwoStage).is_err());
        assert_eq!(water_frequency(&obs, 30.0, 30.5, WfMode::Pooled).unwrap(), 1.0);
    }

    #[test]
    fn binarize() {
        assert_eq!(binarize_wf(0.10, 0.25).unwrap(), 0);
        assert_eq!(binarize_wf(0.60, 0.25).unwrap(), 1);
        assert_eq!(binarize_wf(0.25, 0.25).unwrap(), 0);
        assert!(binarize_wf(1.2, 0.25).is_err());
        assert!(binarize_wf(-0.1, 0.25).is_err());
    }

    fn record(x: usize, y: usize, t_start: f64, break_time: Option<f64>) -> SegmentRecord {
        SegmentRecord {
            x,
            y,
            t_start,
            t_end: break_time.map_or(t_start + 400.0, |b| b - 1.0),
            n_obs: 16,
            ended_by_break: break_time.is_some(),
            break_time,
            features: vec![0.5; N_FEATURES],
            rmse: vec![0.01; 7],
        }
    }

    fn masks(states: &[[u8; 2]]) -> MaskSeries {
        let times = (0..states.len()).map(|k| 100.0 * k as f64).collect();
        let grids = states
            .iter()
            .map(|s| Grid::new(2, 1, GeoTransform::default(), NODATA_CLASS, s.to_vec()).unwrap())
            .collect();
        MaskSeries::new(times, grids).unwrap()
    }

    #[test]
    fn dataset_labels_each_segment() {
        // pixel 0: water for t < 300, land afterwards; pixel 1 invalid throughout
        let m = masks(&[[1, 255], [1, 255], [1, 255], [0, 255], [0, 255], [0, 255]]);
        let recs = vec![record(0, 0, 0.0, Some(300.0)), record(0, 0, 300.0, None), record(1, 0, 0.0, None)];
        let (ds, report) = build_dataset(&recs, &m, 4, (0.0, 250.0), WfMode::TwoStage).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].wf, 1.0);
        assert_eq!(ds.samples[1].wf, 0.0);
        assert_eq!((ds.samples[0].seg_idx, ds.samples[1].seg_idx), (0, 1));
        assert!(ds.samples[0].in_train && !ds.samples[1].in_train);
        assert_eq!(ds.region_ids(), vec![4]);
        assert_eq!(report.no_valid_observation, 1);
        assert_eq!(report.skipped, vec![SkippedSegment { x: 1, y: 0, seg_idx: 0 }]);
        assert_eq!(report.labeled + report.no_valid_observation, report.total_segments);

        let outside = vec![record(5, 0, 0.0, None)];
        assert!(matches!(build_dataset(&outside, &m, 0, (0.0, 1.0), WfMode::TwoStage), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_multiset_is_order_independent() {
        let m = masks(&[[1, 0], [0, 0], [1, 1], [1, 0]]);
        let recs = vec![record(0, 0, 0.0, Some(200.0)), record(1, 0, 0.0, None), record(0, 0, 200.0, None)];
        let (a, _) = build_dataset(&recs, &m, 1, (0.0, 1e9), WfMode::TwoStage).unwrap();
        let shuffled = vec![recs[1].clone(), recs[0].clone(), recs[2].clone()];
        let (b, _) = build_dataset(&shuffled, &m, 1, (0.0, 1e9), WfMode::TwoStage).unwrap();
        let key = |s: &LabeledSample| (s.x, s.y, s.seg_idx, s.wf.to_bits());
        let mut ka: Vec<_> = a.samples.iter().map(key).collect();
        let mut kb: Vec<_> = b.samples.iter().map(key).collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
    }

    fn obs_strategy() -> impl Strategy<Value = Vec<(f64, u8)>> {
        prop::collection::vec((0.0f64..3000.0, prop_oneof![Just(0u8), Just(1u8), Just(255u8)]), 1..60)
    }

    proptest! {
        #[test]
        fn duplication_invariance(obs in obs_strategy()) {
            let mut doubled = obs.clone();
            doubled.extend(obs.iter().copied());
            for mode in [WfMode::TwoStage, WfMode::Pooled] {
                let a = water_frequency(&obs, 0.0, 3000.0, mode).ok();
                let b = water_frequency(&doubled, 0.0, 3000.0, mode).ok();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn flipping_to_water_is_monotone(obs in obs_strategy(), pick in any::<prop::sample::Index>()) {
            let i = pick.index(obs.len());
            prop_assume!(obs[i].1 == LAND);
            let mut flipped = obs.clone();
            flipped[i].1 = WATER;
            let a = water_frequency(&obs, 0.0, 3000.0, WfMode::TwoStage).unwrap();
            let b = water_frequency(&flipped, 0.0, 3000.0, WfMode::TwoStage).unwrap();
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        }
    }
}
