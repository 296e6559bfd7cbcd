//! Deterministic synthetic scene stacks with exact water truth.
//!
//! Lakes are axis-aligned ellipses in pixel coordinates; a pixel is water when its
//! center lies inside some lake scaled by the lake's current scale factor. Land patches
//! can switch from vegetated to bare soil, which changes reflectance without changing
//! the water state.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coldlite::DAYS_PER_YEAR;
use crate::error::{Error, Result};
use crate::grid::{write_grid, ClassGrid, GeoTransform, Grid, TileId, NODATA_CLASS, NODATA_F32};
use crate::io::write_json;
use crate::labeling::{water_frequency, WfMode};
use crate::spectral::{LAND, WATER};
use crate::stack::{Scene, SceneStack, N_BANDS};

/// Reflectance archetypes, band order blue, green, red, nir, swir1, swir2, thermal.
pub const WATER_REFLECTANCE: [f64; N_BANDS] = [0.08, 0.10, 0.06, 0.04, 0.03, 0.02, 0.30];
pub const LAND_REFLECTANCE: [f64; N_BANDS] = [0.05, 0.10, 0.08, 0.30, 0.20, 0.12, 0.32];
pub const BARE_REFLECTANCE: [f64; N_BANDS] = [0.10, 0.14, 0.16, 0.22, 0.30, 0.24, 0.34];
pub const CLOUD_REFLECTANCE: [f64; N_BANDS] = [0.60, 0.62, 0.63, 0.65, 0.50, 0.40, 0.22];
/// Relative seasonal amplitude per band; green and swir1 stay flat so water masks only
/// follow the water state.
const SEASONAL_WEIGHT: [f64; N_BANDS] = [0.3, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0];

/// 1994-01-01 in days since 1970-01-01.
pub const DEFAULT_T0: f64 = 8766.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dynamics {
    Stable,
    /// Radii drop to `scale` times their value from `t_break` on.
    Shrink { t_break: f64, scale: f64 },
    /// Radii grow from `scale` times their value to full size at `t_break`.
    Grow { t_break: f64, scale: f64 },
    /// Radii follow `1 + amplitude * sin(2π t / year)`.
    Seasonal { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lake {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub dynamics: Dynamics,
}

impl Lake {
    pub fn scale_at(&self, t: f64) -> f64 {
        match self.dynamics {
            Dynamics::Stable => 1.0,
            Dynamics::Shrink { t_break, scale } => {
                if t < t_break {
                    1.0
                } else {
                    scale
                }
            }
            Dynamics::Grow { t_break, scale } => {
                if t < t_break {
                    scale
                } else {
                    1.0
                }
            }
            Dynamics::Seasonal { amplitude } => 1.0 + amplitude * (TAU * t / DAYS_PER_YEAR).sin(),
        }
    }

    /// Normalized squared distance of the pixel center from the lake center.
    fn rho2(&self, x: usize, y: usize) -> f64 {
        ellipse_rho2(self.center, self.radii, x, y)
    }

    pub fn contains(&self, x: usize, y: usize, t: f64) -> bool {
        let s = self.scale_at(t);
        self.rho2(x, y) <= s * s
    }
}

fn ellipse_rho2(center: [f64; 2], radii: [f64; 2], x: usize, y: usize) -> f64 {
    let dx = (x as f64 + 0.5 - center[0]) / radii[0];
    let dy = (y as f64 + 0.5 - center[1]) / radii[1];
    dx * dx + dy * dy
}

/// Land patch that turns from vegetation to bare soil at `t_break`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub t_break: f64,
}

impl Disturbance {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        ellipse_rho2(self.center, self.radii, x, y) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub width: usize,
    pub height: usize,
    pub region_id: u32,
    pub lakes: Vec<Lake>,
    pub disturbances: Vec<Disturbance>,
    pub noise_sigma: f64,
    pub cloud_prob: f64,
    pub cadence_days: f64,
    pub t0: f64,
    pub t1: f64,
    pub seasonal_amplitude: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            width: 64,
            height: 64,
            region_id: 0,
            lakes: Vec::new(),
            disturbances: Vec::new(),
            noise_sigma: 0.01,
            cloud_prob: 0.0,
            cadence_days: DAYS_PER_YEAR / 12.0,
            t0: DEFAULT_T0,
            t1: DEFAULT_T0 + 8.0 * DAYS_PER_YEAR,
            seasonal_amplitude: 0.02,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("degenerate grid {}x{}", self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.cloud_prob) {
            return bad(format!("cloud_prob {} outside [0, 1]", self.cloud_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t0 < self.t1) {
            return bad(format!("time range [{}, {}]", self.t0, self.t1));
        }
        if !(self.cadence_days > 0.0 && self.cadence_days.is_finite()) {
            return bad(format!("cadence_days {}", self.cadence_days));
        }
        if !self.seasonal_amplitude.is_finite() {
            return bad("seasonal_amplitude must be finite".into());
        }
        for (i, l) in self.lakes.iter().enumerate() {
            if !(l.radii[0] > 0.0 && l.radii[1] > 0.0) || !l.center.iter().all(|c| c.is_finite()) {
                return bad(format!("lake {i} needs a finite center and positive radii"));
            }
            match l.dynamics {
                Dynamics::Shrink { t_break, scale } | Dynamics::Grow { t_break, scale } => {
                    if !(scale > 0.0 && scale < 1.0) || !t_break.is_finite() {
                        return bad(format!("lake {i} needs scale in (0, 1) and a finite t_break"));
                    }
                }
                Dynamics::Seasonal { amplitude } => {
                    if !(0.0..1.0).contains(&amplitude) {
                        return bad(format!("lake {i} seasonal amplitude {amplitude} outside [0, 1)"));
                    }
                }
                Dynamics::Stable => {}
            }
        }
        for (i, d) in self.disturbances.iter().enumerate() {
            if !(d.radii[0] > 0.0 && d.radii[1] > 0.0) || !d.t_break.is_finite() {
                return bad(format!("disturbance {i} needs positive radii and a finite t_break"));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        let n = ((self.t1 - self.t0) / self.cadence_days).floor() as usize + 1;
        (0..n).map(|k| self.t0 + k as f64 * self.cadence_days).collect()
    }

    pub fn is_water(&self, x: usize, y: usize, t: f64) -> bool {
        self.lakes.iter().any(|l| l.contains(x, y, t))
    }

    fn is_bare(&self, x: usize, y: usize, t: f64) -> bool {
        self.disturbances.iter().any(|d| t >= d.t_break && d.contains(x, y))
    }

    /// Noise-free, cloud-free reflectance of one pixel.
    pub fn clean_reflectance(&self, x: usize, y: usize, t: f64) -> [f64; N_BANDS] {
        let base = if self.is_water(x, y, t) {
            WATER_REFLECTANCE
        } else if self.is_bare(x, y, t) {
            BARE_REFLECTANCE
        } else {
            LAND_REFLECTANCE
        };
        let season = self.seasonal_amplitude * (TAU * t / DAYS_PER_YEAR).sin();
        std::array::from_fn(|b| base[b] + season * SEASONAL_WEIGHT[b])
    }

    fn geo(&self) -> GeoTransform {
        GeoTransform::default()
    }

    pub fn tile(&self) -> TileId {
        TileId {
            h: self.region_id,
            v: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakKind {
    /// The water state changes.
    Water,
    /// Vegetation to bare soil; the water state is unchanged.
    LandCover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueBreak {
    pub x: usize,
    pub y: usize,
    pub t_break: f64,
    pub kind: BreakKind,
}

/// Exact water state per scene plus the true breaks.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    pub scenario: Scenario,
    pub times: Vec<f64>,
    pub water: Vec<ClassGrid>,
    /// Sorted by `(y, x, t_break)`.
    pub breaks: Vec<TrueBreak>,
}

impl TruthBundle {
    pub fn pixel_states(&self, x: usize, y: usize) -> Vec<(f64, u8)> {
        self.times.iter().zip(&self.water).map(|(&t, g)| (t, g.get(x, y))).collect()
    }

    pub fn breaks_at(&self, x: usize, y: usize) -> Vec<TrueBreak> {
        self.breaks.iter().filter(|b| b.x == x && b.y == y).copied().collect()
    }

    pub fn water_breaks(&self) -> impl Iterator<Item = &TrueBreak> {
        self.breaks.iter().filter(|b| b.kind == BreakKind::Water)
    }

    /// Writes `truth.json` (scenario, times, breaks) and one water grid per scene.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.water.len());
        for (k, g) in self.water.iter().enumerate() {
            let name = format!("truth_{k:04}_water.hgrd");
            write_grid(g, &dir.join(&name))?;
            files.push(name);
        }
        let doc = TruthFile {
            scenario: self.scenario.clone(),
            times: self.times.clone(),
            water: files,
            breaks: self.breaks.clone(),
        };
        write_json(&dir.join("truth.json"), &doc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthFile {
    scenario: Scenario,
    times: Vec<f64>,
    water: Vec<String>,
    breaks: Vec<TrueBreak>,
}

/// Pixels whose water state differs before and after a shrink/grow event.
fn true_breaks(sc: &Scenario) -> Vec<TrueBreak> {
    let mut out = Vec::new();
    let mut events: Vec<(f64, BreakKind)> = sc
        .lakes
        .iter()
        .filter_map(|l| match l.dynamics {
            Dynamics::Shrink { t_break, .. } | Dynamics::Grow { t_break, .. } => Some((t_break, BreakKind::Water)),
            _ => None,
        })
        .collect();
    events.extend(sc.disturbances.iter().map(|d| (d.t_break, BreakKind::LandCover)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    events.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    for y in 0..sc.height {
        for x in 0..sc.width {
            for &(t, kind) in &events {
                let eps = 1e-6;
                let changed = match kind {
                    BreakKind::Water => sc.is_water(x, y, t - eps) != sc.is_water(x, y, t),
                    BreakKind::LandCover => {
                        !sc.is_water(x, y, t) && sc.is_bare(x, y, t) != sc.is_bare(x, y, t - eps)
                    }
                };
                if changed {
                    out.push(TrueBreak { x, y, t_break: t, kind });
                }
            }
        }
    }
    out
}

/// Random stream of scene `k`: the scenario seed with stream `k + 1`.
fn scene_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

/// Generates the scene stack and its truth. Per pixel (row-major) each scene draws one
/// uniform for the cloud flag, then seven standard normals for band noise.
pub fn generate(sc: &Scenario) -> Result<(SceneStack, TruthBundle)> {
    sc.validate()?;
    let times = sc.times();
    let geo = sc.geo();
    let (w, h) = (sc.width, sc.height);
    let per_scene: Vec<(Scene, ClassGrid)> = times
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut rng = scene_rng(sc.seed, k);
            let mut bands: Vec<Vec<f32>> = vec![Vec::with_capacity(w * h); N_BANDS];
            let mut qa = Vec::with_capacity(w * h);
            let mut water = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let cloudy = rng.random::<f64>() < sc.cloud_prob;
                    let wet = sc.is_water(x, y, t);
                    water.push(if wet { WATER } else { LAND });
                    qa.push(cloudy as u8);
                    let clean = if cloudy { CLOUD_REFLECTANCE } else { sc.clean_reflectance(x, y, t) };
                    for (b, band) in bands.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        band.push((clean[b] + sc.noise_sigma * z) as f32);
                    }
                }
            }
            let grids: Vec<Grid<f32>> = bands
                .into_iter()
                .map(|v| Grid::new(w, h, geo, NODATA_F32, v))
                .collect::<Result<_>>()?;
            let scene = Scene {
                time_days: t,
                bands: grids.try_into().expect("seven bands"),
                qa: Grid::new(w, h, geo, NODATA_CLASS, qa)?,
            };
            Ok((scene, Grid::new(w, h, geo, NODATA_CLASS, water)?))
        })
        .collect::<Result<_>>()?;
    let (scenes, water): (Vec<Scene>, Vec<ClassGrid>) = per_scene.into_iter().unzip();
    let stack = SceneStack::new(sc.tile(), scenes)?;
    let truth = TruthBundle {
        scenario: sc.clone(),
        times,
        water,
        breaks: true_breaks(sc),
    };
    Ok((stack, truth))
}

/// Two-stage water frequency of the true states of a pixel over `[t_start, t_end)`.
pub fn true_wf(truth: &TruthBundle, x: usize, y: usize, t_start: f64, t_end: f64) -> Result<f64> {
    if x >= truth.scenario.width || y >= truth.scenario.height {
        return Err(Error::InvalidArgument(format!("pixel ({x}, {y}) outside the scenario grid")));
    }
    water_frequency(&truth.pixel_states(x, y), t_start, t_end, WfMode::TwoStage)
}

/// A scenario with a mix of lake dynamics and land-cover breaks, placed by a seeded
/// generator. Used for multi-region benchmark datasets.
pub fn mixed_scenario(width: usize, height: usize, region_id: u32, seed: u64, years: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0000);
    let t0 = DEFAULT_T0;
    let t1 = t0 + years * DAYS_PER_YEAR;
    let (wf, hf) = (width as f64, height as f64);
    let span = t1 - t0;
    let break_time = |rng: &mut ChaCha8Rng| t0 + span * rng.random_range(0.35..0.65);
    let mut lakes = Vec::new();
    let kinds = ["stable", "shrink", "grow", "seasonal", "shrink", "grow"];
    let n_lakes = ((wf * hf) / 700.0).round().max(3.0) as usize;
    for i in 0..n_lakes {
        let r = rng.random_range(0.06..0.14) * wf.min(hf);
        let center = [rng.random_range(0.0..wf), rng.random_range(0.0..hf)];
        let radii = [r * rng.random_range(0.7..1.3), r * rng.random_range(0.7..1.3)];
        let dynamics = match kinds[i % kinds.len()] {
            "stable" => Dynamics::Stable,
            "shrink" => Dynamics::Shrink {
                t_break: break_time(&mut rng),
                scale: rng.random_range(0.4..0.6),
            },
            "grow" => Dynamics::Grow {
                t_break: break_time(&mut rng),
                scale: rng.random_range(0.4..0.6),
            },
            _ => Dynamics::Seasonal {
                amplitude: rng.random_range(0.15..0.3),
            },
        };
        lakes.push(Lake { center, radii, dynamics });
    }
    let n_dist = (n_lakes / 2).max(1);
    let disturbances = (0..n_dist)
        .map(|_| {
            let r = rng.random_range(0.05..0.1) * wf.min(hf);
            Disturbance {
                center: [rng.random_range(0.0..wf), rng.random_range(0.0..hf)],
                radii: [r, r * rng.random_range(0.7..1.3)],
                t_break: break_time(&mut rng),
            }
        })
        .collect();
    Scenario {
        width,
        height,
        region_id,
        lakes,
        disturbances,
        noise_sigma: 0.01,
        cloud_prob: 0.1,
        cadence_days: DAYS_PER_YEAR / 12.0,
        t0,
        t1,
        seasonal_amplitude: 0.02,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{compute_mndwi, water_mask};

    fn lake_scenario(dynamics: Dynamics, sigma: f64, cloud: f64) -> Scenario {
        Scenario {
            width: 20,
            height: 16,
            lakes: vec![Lake {
                center: [10.0, 8.0],
                radii: [6.0, 5.0],
                dynamics,
            }],
            noise_sigma: sigma,
            cloud_prob: cloud,
            t1: DEFAULT_T0 + 3.0 * DAYS_PER_YEAR,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn all_clouds() {
        let (stack, _) = generate(&lake_scenario(Dynamics::Stable, 0.01, 1.0)).unwrap();
        assert!(stack.scenes().iter().all(|s| s.qa.samples().iter().all(|&q| q == 1)));
    }

    #[test]
    fn noiseless_masks_equal_truth() {
        for dynamics in [
            Dynamics::Stable,
            Dynamics::Shrink {
                t_break: DEFAULT_T0 + 400.0,
                scale: 0.5,
            },
            Dynamics::Seasonal { amplitude: 0.3 },
        ] {
            let (stack, truth) = generate(&lake_scenario(dynamics, 0.0, 0.0)).unwrap();
            for (scene, t) in stack.scenes().iter().zip(&truth.water) {
                let idx = compute_mndwi(&scene.bands[1], &scene.bands[4]).unwrap();
                assert_eq!(&water_mask(&idx, 0.0).unwrap(), t);
            }
        }
    }

    #[test]
    fn same_seed_same_stack_different_seed_differs() {
        let sc = lake_scenario(Dynamics::Stable, 0.01, 0.2);
        let (a, ta) = generate(&sc).unwrap();
        let (b, tb) = generate(&sc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&Scenario { seed: 12, ..sc }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generation_is_thread_count_independent() {
        let sc = lake_scenario(Dynamics::Stable, 0.01, 0.2);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| generate(&sc).unwrap().0)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn archetype_mndwi_signs() {
        let m = |r: [f64; N_BANDS]| (r[1] - r[4]) / (r[1] + r[4]);
        assert!((m(WATER_REFLECTANCE) - 0.5385).abs() < 1e-3);
        assert!((m(LAND_REFLECTANCE) + 0.3333).abs() < 1e-3);
        assert!(m(BARE_REFLECTANCE) < -0.3);
    }

    #[test]
    fn true_wf_examples() {
        let (_, truth) = generate(&lake_scenario(Dynamics::Stable, 0.01, 0.3)).unwrap();
        assert_eq!(true_wf(&truth, 10, 8, 0.0, f64::INFINITY).unwrap(), 1.0);
        assert_eq!(true_wf(&truth, 0, 0, 0.0, f64::INFINITY).unwrap(), 0.0);
        assert!(true_wf(&truth, 10, 8, 0.0, 1.0).is_err());
        assert!(true_wf(&truth, 99, 8, 0.0, 1e9).is_err());
    }

    #[test]
    fn seasonal_shoreline_is_half_wet() {
        // a pixel exactly on the nominal shoreline is inside while sin > 0
        let sc = Scenario {
            width: 8,
            height: 1,
            lakes: vec![Lake {
                center: [0.5, 0.5],
                radii: [4.0, 4.0],
                dynamics: Dynamics::Seasonal { amplitude: 0.3 },
            }],
            // monthly samples offset by half a month avoid sin == 0
            t0: DAYS_PER_YEAR * 24.0 + DAYS_PER_YEAR / 24.0,
            t1: DAYS_PER_YEAR * 27.0,
            ..Default::default()
        };
        let (_, truth) = generate(&sc).unwrap();
        assert_eq!(true_wf(&truth, 4, 0, 0.0, f64::INFINITY).unwrap(), 0.5);
    }

    #[test]
    fn breaks_only_where_the_state_changes() {
        let tb = DEFAULT_T0 + 500.0;
        let sc = Scenario {
            disturbances: vec![Disturbance {
                center: [3.0, 3.0],
                radii: [2.0, 2.0],
                t_break: tb + 100.0,
            }],
            ..lake_scenario(Dynamics::Shrink { t_break: tb, scale: 0.5 }, 0.01, 0.0)
        };
        let (_, truth) = generate(&sc).unwrap();
        for y in 0..sc.height {
            for x in 0..sc.width {
                let states = truth.pixel_states(x, y);
                let changes = states.windows(2).filter(|w| w[0].1 != w[1].1).count();
                let water_breaks: Vec<_> = truth.breaks_at(x, y).into_iter().filter(|b| b.kind == BreakKind::Water).collect();
                assert_eq!(changes, water_breaks.len(), "pixel ({x}, {y})");
                for b in water_breaks {
                    assert_eq!(b.t_break, tb);
                    assert!(sc.lakes[0].rho2(x, y) > 0.25 && sc.lakes[0].rho2(x, y) <= 1.0);
                }
            }
        }
        assert!(truth.breaks.iter().any(|b| b.kind == BreakKind::LandCover));
        assert!(truth.water_breaks().count() > 0);
    }

    #[test]
    fn validation_errors() {
        let ok = lake_scenario(Dynamics::Stable, 0.01, 0.0);
        assert!(ok.validate().is_ok());
        assert!(generate(&Scenario { width: 0, ..ok.clone() }).is_err());
        assert!(Scenario { cloud_prob: 1.5, ..ok.clone() }.validate().is_err());
        assert!(Scenario { t1: ok.t0, ..ok.clone() }.validate().is_err());
        let mut bad_lake = ok.clone();
        bad_lake.lakes[0].radii = [0.0, 1.0];
        assert!(bad_lake.validate().is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = mixed_scenario(40, 30, 3, 5, 6.0);
        sc.validate().unwrap();
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&sc).unwrap()).unwrap();
        assert_eq!(back, sc);
        let partial: Scenario = serde_json::from_str(r#"{"width": 5, "height": 4, "seed": 2}"#).unwrap();
        assert_eq!(partial.noise_sigma, 0.01);
    }
}
