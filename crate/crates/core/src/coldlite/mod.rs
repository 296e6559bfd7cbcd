//! Piecewise harmonic modeling of pixel time series with sequential break detection.

mod harmonic;
mod segment;

pub use harmonic::{
    design_row, fit_harmonic, lasso_objective, HarmonicModel, CD_MAX_SWEEPS, CD_TOLERANCE,
    DAYS_PER_YEAR, N_COEFFS,
};
pub use segment::{
    change_score, export_features, pixel_series, segment_series, segment_stack, ColdConfig,
    Observation, PixelSeries, Segment, SegmentRecord, N_FEATURES, RMSE_FLOOR,
};
