//! Time-ordered multi-band scene stacks and their JSON manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_grid_as, write_grid, ClassGrid, FloatGrid, TileId};
use crate::io::{read_json, write_json};

pub const N_BANDS: usize = 7;

/// Fixed band order used everywhere in the crate.
pub const BAND_NAMES: [&str; N_BANDS] = ["blue", "green", "red", "nir", "swir1", "swir2", "thermal"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Blue = 0,
    Green = 1,
    Red = 2,
    Nir = 3,
    Swir1 = 4,
    Swir2 = 5,
    Thermal = 6,
}

impl Band {
    pub const ALL: [Band; N_BANDS] = [
        Band::Blue,
        Band::Green,
        Band::Red,
        Band::Nir,
        Band::Swir1,
        Band::Swir2,
        Band::Thermal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        BAND_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Band> {
        BAND_NAMES.iter().position(|n| *n == name).map(|i| Band::ALL[i])
    }
}

/// One acquisition: seven reflectance bands plus a QA grid (0 = clear).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub time_days: f64,
    pub bands: [FloatGrid; N_BANDS],
    pub qa: ClassGrid,
}

impl Scene {
    pub fn band(&self, band: Band) -> &FloatGrid {
        &self.bands[band.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneStack {
    tile: TileId,
    scenes: Vec<Scene>,
}

impl SceneStack {
    /// Builds a stack; scenes must already be in strictly increasing time order.
    pub fn new(tile: TileId, scenes: Vec<Scene>) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::InvalidArgument("scene stack needs at least one scene".into()))?;
        let reference = &first.bands[0];
        for (k, scene) in scenes.iter().enumerate() {
            if !scene.time_days.is_finite() {
                return Err(Error::Data(format!("scene {k} has non-finite time")));
            }
            if k > 0 && scene.time_days <= scenes[k - 1].time_days {
                return Err(Error::Data(format!(
                    "scene times must be strictly increasing: {} then {}",
                    scenes[k - 1].time_days, scene.time_days
                )));
            }
            for (b, grid) in scene.bands.iter().enumerate() {
                reference.ensure_same_shape(grid, &format!("scene {k} band {}", BAND_NAMES[b]))?;
            }
            reference.ensure_same_shape(&scene.qa, &format!("scene {k} qa"))?;
        }
        Ok(SceneStack { tile, scenes })
    }

    pub fn tile(&self) -> TileId {
        self.tile
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.scenes.iter().map(|s| s.time_days).collect()
    }

    pub fn width(&self) -> usize {
        self.scenes[0].qa.width()
    }

    pub fn height(&self) -> usize {
        self.scenes[0].qa.height()
    }

    /// Reference grid carrying the shared raster frame.
    pub fn frame(&self) -> &ClassGrid {
        &self.scenes[0].qa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tile: TileId,
    pub scenes: Vec<ManifestScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub time_days: f64,
    pub bands: BTreeMap<String, String>,
    pub qa: String,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_grid<T: crate::grid::Sample>(path: &Path, scene: &str) -> Result<crate::grid::Grid<T>> {
    if !path.exists() {
        return Err(Error::Data(format!("{scene}: file {} not found", path.display())));
    }
    read_grid_as(path)
}

/// Loads a stack from its manifest. Band paths are resolved relative to the manifest.
pub fn read_stack(manifest_path: &Path) -> Result<SceneStack> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<&ManifestScene> = manifest.scenes.iter().collect();
    entries.sort_by(|a, b| a.time_days.total_cmp(&b.time_days));
    if let Some(w) = entries.windows(2).find(|w| w[0].time_days == w[1].time_days) {
        return Err(Error::Data(format!("duplicate scene timestamp {}", w[0].time_days)));
    }
    let mut scenes = Vec::with_capacity(entries.len());
    for entry in entries {
        let label = format!("scene at t={}", entry.time_days);
        if let Some(unknown) = entry.bands.keys().find(|k| Band::from_name(k).is_none()) {
            return Err(Error::Format(format!("{label}: unknown band label '{unknown}'")));
        }
        let mut bands = Vec::with_capacity(N_BANDS);
        for name in BAND_NAMES {
            let rel = entry
                .bands
                .get(name)
                .ok_or_else(|| Error::Format(format!("{label}: missing band path '{name}'")))?;
            bands.push(load_grid::<f32>(&resolve(base, rel), &label)?);
        }
        let qa = load_grid::<u8>(&resolve(base, &entry.qa), &label)?;
        let bands: [FloatGrid; N_BANDS] = bands.try_into().expect("seven bands");
        scenes.push(Scene {
            time_days: entry.time_days,
            bands,
            qa,
        });
    }
    SceneStack::new(manifest.tile, scenes)
}

/// Writes every grid of the stack into `dir` plus a `manifest.json`; returns the manifest path.
pub fn write_stack(stack: &SceneStack, dir: &Path) -> Result<PathBuf> {
    let mut scenes = Vec::with_capacity(stack.len());
    for (k, scene) in stack.scenes().iter().enumerate() {
        let mut bands = BTreeMap::new();
        for band in Band::ALL {
            let name = format!("scene_{k:04}_{}.hgrd", band.name());
            write_grid(scene.band(band), &dir.join(&name))?;
            bands.insert(band.name().to_string(), name);
        }
        let qa = format!("scene_{k:04}_qa.hgrd");
        write_grid(&scene.qa, &dir.join(&qa))?;
        scenes.push(ManifestScene {
            time_days: scene.time_days,
            bands,
            qa,
        });
    }
    let path = dir.join("manifest.json");
    write_json(
        &path,
        &Manifest {
            tile: stack.tile(),
            scenes,
        },
    )?;
    Ok(path)
}
