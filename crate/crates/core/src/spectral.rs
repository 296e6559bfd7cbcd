//! MNDWI and water masks.

use crate::error::{Error, Result};
use crate::grid::{ClassGrid, FloatSample, Grid, Sample, NODATA_CLASS};

pub const LAND: u8 = 0;
pub const WATER: u8 = 1;
pub const INVALID: u8 = NODATA_CLASS;

/// Default MNDWI water threshold.
pub const DEFAULT_MNDWI_THRESHOLD: f64 = 0.0;

/// Scalar MNDWI, `(green - swir1) / (green + swir1)`.
///
/// `None` for a zero denominator or a result outside [-1, 1], which only happens when
/// one reflectance is negative.
pub fn mndwi(green: f64, swir1: f64) -> Option<f64> {
    let denom = green + swir1;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let v = (green - swir1) / denom;
    (-1.0..=1.0).contains(&v).then_some(v)
}

/// Water code for one MNDWI value: strictly above the threshold is water.
pub fn classify_water(index: Option<f64>, threshold: f64) -> u8 {
    match index {
        Some(v) if v > threshold => WATER,
        Some(v) if v.is_finite() => LAND,
        _ => INVALID,
    }
}

pub fn compute_mndwi<T: FloatSample>(green: &Grid<T>, swir1: &Grid<T>) -> Result<Grid<T>> {
    green.ensure_same_shape(swir1, "mndwi inputs")?;
    let nodata = green.nodata();
    let out = green
        .samples()
        .iter()
        .zip(swir1.samples())
        .map(|(&g, &s)| {
            if green.is_nodata(g) || swir1.is_nodata(s) {
                return nodata;
            }
            mndwi(g.to_f64(), s.to_f64()).map_or(nodata, T::from_f64_lossy)
        })
        .collect();
    green.with_samples(nodata, out)
}

pub fn water_mask<T: FloatSample>(index: &Grid<T>, threshold: f64) -> Result<ClassGrid> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {threshold}")));
    }
    let out = index
        .samples()
        .iter()
        .map(|&v| {
            let v = (!index.is_nodata(v)).then(|| v.to_f64());
            classify_water(v, threshold)
        })
        .collect();
    index.with_samples(NODATA_CLASS, out)
}

/// Keeps samples where `qa == 0`, nodata elsewhere.
pub fn apply_qa<T: Sample>(band: &Grid<T>, qa: &ClassGrid) -> Result<Grid<T>> {
    band.ensure_same_shape(qa, "apply_qa")?;
    let nodata = band.nodata();
    let out = band
        .samples()
        .iter()
        .zip(qa.samples())
        .map(|(&v, &q)| if q == 0 { v } else { nodata })
        .collect();
    band.with_samples(nodata, out)
}
