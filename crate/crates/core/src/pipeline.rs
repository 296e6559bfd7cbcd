//! Stage orchestration: every stage reads its inputs from the work directory, writes its
//! outputs atomically and leaves a run manifest with input and output digests.
//!
//! Layout under the work directory:
//!
//! ```text
//! regions/r{id}/stack/        synth      scene grids + manifest.json
//! regions/r{id}/truth/        synth      truth.json + true water grids
//! regions/r{id}/mndwi/        mndwi      MNDWI grids (QA-masked) + manifest.json
//! regions/r{id}/masks/        mask       water masks + manifest.json
//! regions/r{id}/segments.jsonl           segment
//! regions/r{id}/dataset.jsonl            label (plus skip_report.json)
//! models/*.json                          train
//! regions/r{id}/predictions.jsonl        infer
//! regions/r{id}/water_map.hgrd           map
//! regions/r{id}/changes.jsonl            change (plus change_map.hgrd)
//! reports/*.json, reports/*.txt          eval
//! regions/r{id}/*.ppm                    render
//! manifests/{stage}.json                 every stage
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::change::{
    attach_labels, change_via_regression, cross_validate_change, extract_break_pairs, train_change_classifier,
    ChangePath, ChangeRecord, DECREASE, DEFAULT_DELTA_THRESHOLD, INCREASE, UNCHANGED,
};
use crate::coldlite::{segment_stack, ColdConfig, SegmentRecord};
use crate::error::{Error, Result};
use crate::grid::{read_grid_as, write_grid, ClassGrid, FloatGrid, Grid, NODATA_CLASS};
use crate::io::{read_json, read_jsonl, sha256_file, sha256_hex, write_atomic, write_json, write_jsonl};
use crate::labeling::{build_dataset, Dataset, LabeledSample, MaskSeries, WfMode, DEFAULT_WF_THRESHOLD};
use crate::learn::{
    accuracy_report, cross_validate, nmse, train_classifier, train_regressor, BoostedModel, CvMode, Matrix,
    MetricRow, MetricsReport, ModelSpec, CHANGE_TABLE_LABELS, CI_FOOTER, NMSE_LABEL, WATER_TABLE_LABELS,
};
use crate::render::{change_map, change_map_palette, render_map, water_map, water_map_palette, Palette};
use crate::spectral::{apply_qa, compute_mndwi, water_mask, DEFAULT_MNDWI_THRESHOLD};
use crate::stack::{read_stack, write_stack, Band, Manifest as StackManifest};
use crate::synth::{generate, mixed_scenario, Scenario};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub mndwi: f64,
    pub water: f64,
    pub delta: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            mndwi: DEFAULT_MNDWI_THRESHOLD,
            water: DEFAULT_WF_THRESHOLD,
            delta: DEFAULT_DELTA_THRESHOLD,
        }
    }
}

/// Generator shortcut: a seeded mix of lakes and land-cover patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedSpec {
    pub width: usize,
    pub height: usize,
    pub years: f64,
}

/// One region: exactly one of an inline scenario, a mixed generator spec, or an existing
/// stack manifest (resolved relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSource {
    pub region_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed: Option<MixedSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Ppm,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub format: ImageFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub water_palette: Option<Palette>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub change_palette: Option<Palette>,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

fn default_change_model() -> ModelSpec {
    ModelSpec {
        smote: true,
        ..ModelSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Output root, relative to the config file.
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub regions: Vec<RegionSource>,
    #[serde(default)]
    pub cold: ColdConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub wf_mode: WfMode,
    /// `[t0, t1)` in days; segments overlapping it are inside the training timeframe.
    /// Unset means the whole record.
    #[serde(default)]
    pub training_window: Option<[f64; 2]>,
    /// Water-frequency models. The hyperparameter seed is replaced by `seed`.
    #[serde(default)]
    pub model: ModelSpec,
    /// Change classifier (SMOTE on by default).
    #[serde(default = "default_change_model")]
    pub change_model: ModelSpec,
    /// Region excluded from training; maps of it are pure inference.
    #[serde(default)]
    pub region_holdout: Option<u32>,
    /// Water maps show the segment covering this time; unset shows each pixel's last
    /// segment.
    #[serde(default)]
    pub map_time: Option<f64>,
    #[serde(default)]
    pub render: RenderConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regions.is_empty() {
            return bad("no regions configured".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.regions {
            if !seen.insert(r.region_id) {
                return bad(format!("region {} listed twice", r.region_id));
            }
            let n = r.scenario.is_some() as u8 + r.mixed.is_some() as u8 + r.stack.is_some() as u8;
            if n != 1 {
                return bad(format!(
                    "region {} needs exactly one of scenario, mixed, stack",
                    r.region_id
                ));
            }
            if let Some(sc) = &r.scenario {
                sc.validate()?;
            }
            if let Some(m) = &r.mixed {
                if m.width == 0 || m.height == 0 || !(m.years > 0.0) {
                    return bad(format!("region {}: degenerate mixed spec", r.region_id));
                }
            }
        }
        self.cold.validate()?;
        let t = &self.thresholds;
        if !(-1.0..=1.0).contains(&t.mndwi) {
            return bad(format!("mndwi threshold {} outside [-1, 1]", t.mndwi));
        }
        if !(0.0..1.0).contains(&t.water) {
            return bad(format!("water threshold {} outside [0, 1)", t.water));
        }
        if !(0.0..1.0).contains(&t.delta) {
            return bad(format!("delta threshold {} outside [0, 1)", t.delta));
        }
        if let Some([a, b]) = self.training_window {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return bad(format!("training window [{a}, {b}) is empty"));
            }
        }
        if let Some(h) = self.region_holdout {
            if !seen.contains(&h) {
                return bad(format!("holdout region {h} is not configured"));
            }
        }
        self.model.hyperparameters.validate()?;
        self.change_model.hyperparameters.validate()?;
        Ok(())
    }

    fn window(&self) -> (f64, f64) {
        match self.training_window {
            Some([a, b]) => (a, b),
            None => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn wf_spec(&self) -> ModelSpec {
        let mut spec = self.model;
        spec.wf_threshold = self.thresholds.water;
        spec.hyperparameters.seed = self.seed;
        spec
    }

    fn change_spec(&self) -> ModelSpec {
        let mut spec = self.change_model;
        spec.hyperparameters.seed = self.seed;
        spec
    }

    /// Scenario of a synthetic region with its effective seed.
    fn scenario(&self, r: &RegionSource) -> Option<Scenario> {
        let mix = |x: u64| {
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(x)
                .rotate_left(17)
        };
        if let Some(sc) = &r.scenario {
            let mut sc = sc.clone();
            sc.region_id = r.region_id;
            sc.seed = mix(sc.seed);
            return Some(sc);
        }
        r.mixed.map(|m| {
            let seed = mix(u64::from(r.region_id));
            mixed_scenario(m.width, m.height, r.region_id, seed, m.years)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Mndwi,
    Mask,
    Segment,
    Label,
    Train,
    Infer,
    Map,
    Change,
    Eval,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Synth,
        Stage::Mndwi,
        Stage::Mask,
        Stage::Segment,
        Stage::Label,
        Stage::Train,
        Stage::Infer,
        Stage::Map,
        Stage::Change,
        Stage::Eval,
        Stage::Render,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Mndwi => "mndwi",
            Stage::Mask => "mask",
            Stage::Segment => "segment",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Map => "map",
            Stage::Change => "change",
            Stage::Eval => "eval",
            Stage::Render => "render",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage '{s}'")))
    }
}

/// Per-stage record of what was read and written. Paths are relative to the work
/// directory when inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// Time series of grids stored as numbered files plus a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SeriesManifest {
    times: Vec<f64>,
    files: Vec<String>,
}

/// One inferred segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x: usize,
    pub y: usize,
    pub seg_idx: usize,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub break_time: Option<f64>,
    pub wf: f64,
    pub water: bool,
    /// Water probability of the direct classifier.
    pub water_prob: f64,
    pub in_train: bool,
}

/// A break pair with its predicted change class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeOutput {
    pub record: ChangeRecord,
    pub predicted_wf_before: f64,
    pub predicted_wf_after: f64,
    pub predicted_delta: i32,
}

/// Line of a standalone predictions file for `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub pred: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    /// Values are water frequencies.
    Wf,
    /// Values are change classes -1, 0, +1.
    Change,
}

impl FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<EvalTask> {
        match s {
            "wf" => Ok(EvalTask::Wf),
            "change" => Ok(EvalTask::Change),
            _ => Err(Error::InvalidArgument(format!("unknown eval task '{s}' (wf, change)"))),
        }
    }
}

/// Report for a standalone file of prediction / truth pairs.
pub fn evaluate_pairs(pairs: &[PredictionPair], task: EvalTask, threshold: f64) -> Result<MetricsReport> {
    let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| (p.pred, p.truth)).unzip();
    let one = |v: Option<f64>| vec![v];
    let (title, rows, pooled) = match task {
        EvalTask::Wf => {
            let cls = |v: &[f64]| -> Result<Vec<i32>> {
                v.iter().map(|&w| crate::labeling::binarize_wf(w, threshold).map(i32::from)).collect()
            };
            let rep = accuracy_report(&cls(&pred)?, &cls(&truth)?, &[0, 1])?;
            let rows = vec![
                MetricRow::new(NMSE_LABEL, one(nmse(&pred, &truth).ok())),
                MetricRow::new(WATER_TABLE_LABELS[0], one(Some(rep.overall))),
                MetricRow::new(WATER_TABLE_LABELS[1], one(rep.recall_of(0))),
                MetricRow::new(WATER_TABLE_LABELS[2], one(rep.recall_of(1))),
            ];
            ("Water-frequency predictions", rows, rep)
        }
        EvalTask::Change => {
            let cls = |v: &[f64]| -> Result<Vec<i32>> {
                v.iter()
                    .map(|&c| {
                        if c == c.round() && (-1.0..=1.0).contains(&c) {
                            Ok(c as i32)
                        } else {
                            Err(Error::Data(format!("change class {c} not in -1, 0, 1")))
                        }
                    })
                    .collect()
            };
            let rep = crate::change::evaluate_change(&cls(&pred)?, &cls(&truth)?)?;
            let rows = vec![
                MetricRow::new(CHANGE_TABLE_LABELS[0], one(Some(rep.overall))),
                MetricRow::new(CHANGE_TABLE_LABELS[1], one(rep.recall_of(UNCHANGED))),
                MetricRow::new(CHANGE_TABLE_LABELS[2], one(rep.recall_of(DECREASE))),
                MetricRow::new(CHANGE_TABLE_LABELS[3], one(rep.recall_of(INCREASE))),
            ];
            ("Change-class predictions", rows, rep)
        }
    };
    Ok(MetricsReport {
        title: title.into(),
        folds: Vec::new(),
        rows,
        pooled: Some(pooled),
        notes: vec!["Single evaluation set; no fold interval.".into()],
        config: None,
    })
}

/// Loaded configuration with its resolved work directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    config_dir: PathBuf,
    root: PathBuf,
    config_sha256: String,
    config_value: serde_json::Value,
}

struct Ctx<'a> {
    root: &'a Path,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    notes: Vec<String>,
}

impl Ctx<'_> {
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        self.inputs.insert(self.key(path), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(self.key(path), sha256_file(path)?);
        Ok(())
    }

    fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        self.input(path)?;
        read_json(path)
    }

    fn read_jsonl<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<Vec<T>> {
        self.input(path)?;
        read_jsonl(path)
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, path: &Path, v: &T) -> Result<()> {
        write_json(path, v)?;
        self.output(path)
    }

    fn write_jsonl<T: Serialize>(&mut self, path: &Path, v: &[T]) -> Result<()> {
        write_jsonl(path, v)?;
        self.output(path)
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        write_atomic(path, text.as_bytes())?;
        self.output(path)
    }

    fn write_grid<T: crate::grid::Sample>(&mut self, path: &Path, g: &Grid<T>) -> Result<()> {
        write_grid(g, path)?;
        self.output(path)
    }

    fn read_grid<T: crate::grid::Sample>(&mut self, path: &Path) -> Result<Grid<T>> {
        self.input(path)?;
        read_grid_as(path)
    }

    fn read_model(&mut self, path: &Path) -> Result<BoostedModel> {
        let m: BoostedModel = self.read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

impl Pipeline {
    /// Reads and validates a config file; `work_dir` resolves against its directory.
    pub fn load(config_path: &Path) -> Result<Pipeline> {
        let bytes = std::fs::read(config_path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", config_path.display())))?;
        let cfg: PipelineConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
        let dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Pipeline::new(cfg, &dir)
    }

    pub fn new(cfg: PipelineConfig, config_dir: &Path) -> Result<Pipeline> {
        cfg.validate()?;
        let root = if cfg.work_dir.is_absolute() {
            cfg.work_dir.clone()
        } else {
            config_dir.join(&cfg.work_dir)
        };
        // the output location is not part of what a run computes
        let mut config_value = serde_json::to_value(&cfg)?;
        if let Some(obj) = config_value.as_object_mut() {
            obj.remove("work_dir");
        }
        let config_sha256 = sha256_hex(&serde_json::to_vec(&config_value)?);
        Ok(Pipeline {
            cfg,
            config_dir: config_dir.to_path_buf(),
            root,
            config_sha256,
            config_value,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn work_dir(&self) -> &Path {
        &self.root
    }

    /// Applies command-line overrides and revalidates.
    pub fn with_overrides(self, seed: Option<u64>, holdout: Option<u32>, work_dir: Option<PathBuf>) -> Result<Pipeline> {
        let mut cfg = self.cfg;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if holdout.is_some() {
            cfg.region_holdout = holdout;
        }
        if let Some(w) = work_dir {
            cfg.work_dir = w;
        }
        Pipeline::new(cfg, &self.config_dir)
    }

    fn region_dir(&self, id: u32) -> PathBuf {
        self.root.join("regions").join(format!("r{id}"))
    }

    fn stack_manifest(&self, r: &RegionSource) -> PathBuf {
        match &r.stack {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.config_dir.join(p),
            None => self.region_dir(r.region_id).join("stack").join("manifest.json"),
        }
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            root: &self.root,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn finish(&self, stage: Stage, ctx: Ctx) -> Result<RunManifest> {
        let m = RunManifest {
            stage,
            version: VERSION.to_string(),
            config_sha256: self.config_sha256.clone(),
            seed: self.cfg.seed,
            inputs: ctx.inputs,
            outputs: ctx.outputs,
            notes: ctx.notes,
        };
        write_json(&self.root.join("manifests").join(format!("{stage}.json")), &m)?;
        Ok(m)
    }

    /// Runs one stage.
    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        let mut ctx = self.ctx();
        match stage {
            Stage::Synth => self.synth(&mut ctx)?,
            Stage::Mndwi => self.mndwi(&mut ctx)?,
            Stage::Mask => self.mask(&mut ctx)?,
            Stage::Segment => self.segment(&mut ctx)?,
            Stage::Label => self.label(&mut ctx)?,
            Stage::Train => self.train(&mut ctx)?,
            Stage::Infer => self.infer(&mut ctx)?,
            Stage::Map => self.map(&mut ctx)?,
            Stage::Change => self.change(&mut ctx)?,
            Stage::Eval => self.eval(&mut ctx)?,
            Stage::Render => self.render(&mut ctx)?,
        }
        self.finish(stage, ctx)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<RunManifest>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn synth(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let Some(sc) = self.cfg.scenario(r) else {
                ctx.notes.push(format!("region {} reads an existing stack", r.region_id));
                continue;
            };
            let (stack, truth) = generate(&sc)?;
            let dir = self.region_dir(r.region_id);
            let manifest = write_stack(&stack, &dir.join("stack"))?;
            record_stack_outputs(ctx, &manifest)?;
            truth.write(&dir.join("truth"))?;
            ctx.output(&dir.join("truth").join("truth.json"))?;
            for k in 0..truth.water.len() {
                ctx.output(&dir.join("truth").join(format!("truth_{k:04}_water.hgrd")))?;
            }
        }
        Ok(())
    }

    fn read_stack(&self, ctx: &mut Ctx, r: &RegionSource) -> Result<crate::stack::SceneStack> {
        let path = self.stack_manifest(r);
        ctx.input(&path)?;
        let manifest: StackManifest = read_json(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &manifest.scenes {
            for f in s.bands.values().chain(std::iter::once(&s.qa)) {
                let p = base.join(f);
                if p.exists() {
                    ctx.input(&p)?;
                }
            }
        }
        read_stack(&path)
    }

    fn mndwi(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let stack = self.read_stack(ctx, r)?;
            let dir = self.region_dir(r.region_id).join("mndwi");
            let mut files = Vec::with_capacity(stack.len());
            for (k, scene) in stack.scenes().iter().enumerate() {
                let green = apply_qa(scene.band(Band::Green), &scene.qa)?;
                let swir1 = apply_qa(scene.band(Band::Swir1), &scene.qa)?;
                let idx: FloatGrid = compute_mndwi(&green, &swir1)?;
                let name = format!("mndwi_{k:04}.hgrd");
                ctx.write_grid(&dir.join(&name), &idx)?;
                files.push(name);
            }
            ctx.write_json(
                &dir.join("manifest.json"),
                &SeriesManifest {
                    times: stack.times(),
                    files,
                },
            )?;
        }
        Ok(())
    }

    fn mask(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let rdir = self.region_dir(r.region_id);
            let src: SeriesManifest = ctx.read_json(&rdir.join("mndwi").join("manifest.json"))?;
            let dir = rdir.join("masks");
            let mut files = Vec::with_capacity(src.files.len());
            for (k, f) in src.files.iter().enumerate() {
                let idx: FloatGrid = ctx.read_grid(&rdir.join("mndwi").join(f))?;
                let name = format!("mask_{k:04}.hgrd");
                ctx.write_grid(&dir.join(&name), &water_mask(&idx, self.cfg.thresholds.mndwi)?)?;
                files.push(name);
            }
            ctx.write_json(&dir.join("manifest.json"), &SeriesManifest { times: src.times, files })?;
        }
        Ok(())
    }

    fn segment(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let stack = self.read_stack(ctx, r)?;
            let records = segment_stack(&stack, &self.cfg.cold, self.cfg.thresholds.mndwi);
            ctx.write_jsonl(&self.region_dir(r.region_id).join("segments.jsonl"), &records)?;
        }
        Ok(())
    }

    fn read_segments(&self, ctx: &mut Ctx, id: u32) -> Result<Vec<SegmentRecord>> {
        ctx.read_jsonl(&self.region_dir(id).join("segments.jsonl"))
    }

    fn read_masks(&self, ctx: &mut Ctx, id: u32) -> Result<MaskSeries> {
        let dir = self.region_dir(id).join("masks");
        let m: SeriesManifest = ctx.read_json(&dir.join("manifest.json"))?;
        let grids = m
            .files
            .iter()
            .map(|f| ctx.read_grid::<u8>(&dir.join(f)))
            .collect::<Result<Vec<ClassGrid>>>()?;
        MaskSeries::new(m.times, grids)
    }

    fn label(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let segs = self.read_segments(ctx, r.region_id)?;
            let masks = self.read_masks(ctx, r.region_id)?;
            let (ds, report) = build_dataset(&segs, &masks, r.region_id, self.cfg.window(), self.cfg.wf_mode)?;
            let dir = self.region_dir(r.region_id);
            ctx.write_jsonl(&dir.join("dataset.jsonl"), &ds.samples)?;
            ctx.write_json(&dir.join("skip_report.json"), &report)?;
        }
        Ok(())
    }

    fn read_dataset(&self, ctx: &mut Ctx, id: u32) -> Result<Dataset> {
        Ok(Dataset::new(ctx.read_jsonl::<LabeledSample>(&self.region_dir(id).join("dataset.jsonl"))?))
    }

    /// Labeled break pairs of one region.
    fn labeled_changes(&self, ctx: &mut Ctx, id: u32, ds: &Dataset) -> Result<Vec<ChangeRecord>> {
        let segs = self.read_segments(ctx, id)?;
        let pairs = extract_break_pairs(&segs, id);
        Ok(attach_labels(&pairs, ds, self.cfg.thresholds.delta)?.0)
    }

    fn training_regions(&self) -> impl Iterator<Item = &RegionSource> {
        self.cfg
            .regions
            .iter()
            .filter(|r| Some(r.region_id) != self.cfg.region_holdout)
    }

    fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    fn train(&self, ctx: &mut Ctx) -> Result<()> {
        let mut ds = Dataset::default();
        let mut changes = Vec::new();
        let ids: Vec<u32> = self.training_regions().map(|r| r.region_id).collect();
        for &id in &ids {
            let d = self.read_dataset(ctx, id)?;
            changes.extend(self.labeled_changes(ctx, id, &d)?);
            ds.extend(d);
        }
        if ds.is_empty() {
            return Err(Error::InsufficientData("no labeled segments in the training regions".into()));
        }
        let spec = self.cfg.wf_spec();
        let x = Matrix::from_rows(&ds.features())?;
        let dir = self.models_dir();
        let reg = train_regressor(&x, &ds.targets(), &spec.hyperparameters)?;
        ctx.write_json(&dir.join("wf_regressor.json"), &reg)?;

        let labels: Vec<usize> = ds
            .samples
            .iter()
            .map(|s| usize::from(s.wf > spec.wf_threshold))
            .collect();
        match train_classifier(&x, &labels, 2, &spec.hyperparameters) {
            Ok(m) => ctx.write_json(&dir.join("wf_classifier.json"), &m)?,
            Err(Error::InsufficientData(m)) => ctx.notes.push(format!("water classifier not trained: {m}")),
            Err(e) => return Err(e),
        }
        let cspec = self.cfg.change_spec();
        match train_change_classifier(&changes, &cspec.hyperparameters, cspec.smote, cspec.smote_k) {
            Ok(m) => ctx.write_json(&dir.join("change_classifier.json"), &m)?,
            Err(Error::InsufficientData(m)) => ctx.notes.push(format!("change classifier not trained: {m}")),
            Err(e) => return Err(e),
        }
        ctx.notes.push(format!("training regions {ids:?}, {} segments, {} break pairs", ds.len(), changes.len()));
        Ok(())
    }

    fn infer(&self, ctx: &mut Ctx) -> Result<()> {
        let reg = ctx.read_model(&self.models_dir().join("wf_regressor.json"))?;
        let cls_path = self.models_dir().join("wf_classifier.json");
        let cls = if cls_path.exists() { Some(ctx.read_model(&cls_path)?) } else { None };
        let (w0, w1) = self.cfg.window();
        for r in &self.cfg.regions {
            let segs = self.read_segments(ctx, r.region_id)?;
            let idx = crate::labeling::segment_indices(&segs);
            let preds = segs
                .iter()
                .zip(idx)
                .map(|(s, seg_idx)| {
                    let wf = reg.predict_value(&s.features)?;
                    let water_prob = match &cls {
                        Some(c) => c.predict_proba(&s.features)?[1],
                        None => f64::from(u8::from(wf > self.cfg.thresholds.water)),
                    };
                    Ok(Prediction {
                        x: s.x,
                        y: s.y,
                        seg_idx,
                        t_start: s.t_start,
                        t_end: s.t_end,
                        break_time: s.break_time,
                        wf,
                        water: wf > self.cfg.thresholds.water,
                        water_prob,
                        in_train: s.t_start < w1 && s.label_end() > w0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ctx.write_jsonl(&self.region_dir(r.region_id).join("predictions.jsonl"), &preds)?;
        }
        Ok(())
    }

    fn map(&self, ctx: &mut Ctx) -> Result<()> {
        for r in &self.cfg.regions {
            let dir = self.region_dir(r.region_id);
            let preds: Vec<Prediction> = ctx.read_jsonl(&dir.join("predictions.jsonl"))?;
            let frame = self.frame(ctx, r)?;
            let mut codes = vec![NODATA_CLASS; frame.len()];
            for p in &preds {
                let covers = match self.cfg.map_time {
                    Some(t) => p.t_start <= t && t < p.break_time.unwrap_or(f64::INFINITY),
                    // predictions are in time order per pixel; the last one wins
                    None => true,
                };
                if covers {
                    codes[frame.index(p.x, p.y)] = water_map::code(p.water, p.in_train);
                }
            }
            ctx.write_grid(&dir.join("water_map.hgrd"), &frame.with_samples(NODATA_CLASS, codes)?)?;
        }
        Ok(())
    }

    /// Grid frame (size and placement) of a region, from its first mask.
    fn frame(&self, ctx: &mut Ctx, r: &RegionSource) -> Result<ClassGrid> {
        let dir = self.region_dir(r.region_id).join("masks");
        let m: SeriesManifest = ctx.read_json(&dir.join("manifest.json"))?;
        let first = m
            .files
            .first()
            .ok_or_else(|| Error::Data(format!("region {} has no masks", r.region_id)))?;
        ctx.read_grid(&dir.join(first))
    }

    fn change(&self, ctx: &mut Ctx) -> Result<()> {
        let reg = ctx.read_model(&self.models_dir().join("wf_regressor.json"))?;
        for r in &self.cfg.regions {
            let dir = self.region_dir(r.region_id);
            let segs = self.read_segments(ctx, r.region_id)?;
            let pairs = extract_break_pairs(&segs, r.region_id);
            let ds = self.read_dataset(ctx, r.region_id)?;
            let (labeled, _) = attach_labels(&pairs, &ds, self.cfg.thresholds.delta)?;
            let mut by_key: BTreeMap<(usize, usize, usize), ChangeRecord> =
                labeled.into_iter().map(|c| ((c.x, c.y, c.seg_idx), c)).collect();
            let frame = self.frame(ctx, r)?;
            let mut codes = vec![change_map::NO_BREAK; frame.len()];
            let mut out = Vec::with_capacity(pairs.len());
            for p in pairs {
                let rec = by_key.remove(&(p.x, p.y, p.seg_idx)).unwrap_or(p);
                let delta = change_via_regression(&reg, &rec, self.cfg.thresholds.delta)?;
                // pairs are sorted by time within a pixel, so the latest break wins
                codes[frame.index(rec.x, rec.y)] = match delta {
                    DECREASE => change_map::DECREASE,
                    INCREASE => change_map::INCREASE,
                    _ => change_map::UNCHANGED,
                };
                out.push(ChangeOutput {
                    predicted_wf_before: reg.predict_value(&rec.features_before)?,
                    predicted_wf_after: reg.predict_value(&rec.features_after)?,
                    predicted_delta: delta,
                    record: rec,
                });
            }
            ctx.write_jsonl(&dir.join("changes.jsonl"), &out)?;
            ctx.write_grid(&dir.join("change_map.hgrd"), &frame.with_samples(NODATA_CLASS, codes)?)?;
        }
        Ok(())
    }

    fn eval(&self, ctx: &mut Ctx) -> Result<()> {
        let mut ds = Dataset::default();
        let mut changes = Vec::new();
        for r in &self.cfg.regions {
            let d = self.read_dataset(ctx, r.region_id)?;
            changes.extend(self.labeled_changes(ctx, r.region_id, &d)?);
            ds.extend(d);
        }
        let dir = self.root.join("reports");
        let spec = self.cfg.wf_spec();
        let reg = cross_validate(&ds, &spec, CvMode::Regression)?;
        self.write_report(ctx, &dir, "water_regression", reg.report.clone())?;
        let cls = cross_validate(&ds, &spec, CvMode::Classification)?;
        let mut summary = BTreeMap::new();
        let overlap = intervals_overlap(&reg.report, &cls.report, WATER_TABLE_LABELS[0]);
        let mut cls_report = cls.report;
        if let Some(o) = overlap {
            cls_report.notes.push(format!(
                "Regression and classification overall-accuracy intervals {}.",
                if o { "overlap" } else { "do not overlap" }
            ));
        }
        self.write_report(ctx, &dir, "water_classification", cls_report.clone())?;
        summary.insert("water_regression", reg.report);
        summary.insert("water_classification", cls_report);

        let cspec = self.cfg.change_spec();
        match cross_validate_change(&changes, ChangePath::Regression, &cspec, self.cfg.thresholds.delta, &reg.models) {
            Ok(out) => {
                self.write_report(ctx, &dir, "change_regression", out.report.clone())?;
                summary.insert("change_regression", out.report);
            }
            Err(Error::InsufficientData(m)) => ctx.notes.push(format!("change regression report skipped: {m}")),
            Err(e) => return Err(e),
        }
        match cross_validate_change(&changes, ChangePath::Classification, &cspec, self.cfg.thresholds.delta, &reg.models)
        {
            Ok(out) => {
                self.write_report(ctx, &dir, "change_classification", out.report.clone())?;
                summary.insert("change_classification", out.report);
            }
            Err(Error::InsufficientData(m)) => {
                ctx.notes.push(format!("change classification report skipped: {m}"))
            }
            Err(e) => return Err(e),
        }
        ctx.write_json(&dir.join("summary.json"), &summary)
    }

    fn write_report(&self, ctx: &mut Ctx, dir: &Path, name: &str, mut report: MetricsReport) -> Result<()> {
        report.config = Some(self.config_value.clone());
        if !report.notes.iter().any(|n| n == CI_FOOTER) {
            report.notes.push(CI_FOOTER.into());
        }
        ctx.write_json(&dir.join(format!("{name}.json")), &report)?;
        ctx.write_text(&dir.join(format!("{name}.txt")), &report.render_table())
    }

    fn render(&self, ctx: &mut Ctx) -> Result<()> {
        let water_palette = self.cfg.render.water_palette.clone().unwrap_or_else(water_map_palette);
        let change_palette = self.cfg.render.change_palette.clone().unwrap_or_else(change_map_palette);
        for r in &self.cfg.regions {
            let dir = self.region_dir(r.region_id);
            for (name, palette) in [("water_map", &water_palette), ("change_map", &change_palette)] {
                let grid: ClassGrid = ctx.read_grid(&dir.join(format!("{name}.hgrd")))?;
                let out = dir.join(format!("{name}.ppm"));
                render_map(&grid, palette, &out)?;
                ctx.output(&out)?;
                let png = out.with_extension("png");
                if cfg!(feature = "png") && png.exists() {
                    ctx.output(&png)?;
                }
            }
        }
        Ok(())
    }
}

fn record_stack_outputs(ctx: &mut Ctx, manifest: &Path) -> Result<()> {
    ctx.output(manifest)?;
    let m: StackManifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    for s in &m.scenes {
        for f in s.bands.values().chain(std::iter::once(&s.qa)) {
            ctx.output(&base.join(f))?;
        }
    }
    Ok(())
}

/// Whether the mean ± half-width intervals of one row overlap in two reports.
pub fn intervals_overlap(a: &MetricsReport, b: &MetricsReport, label: &str) -> Option<bool> {
    let sa = a.row(label)?.summary?;
    let sb = b.row(label)?.summary?;
    let (a0, a1) = sa.interval();
    let (b0, b1) = sb.interval();
    Some(a0 <= b1 && b0 <= a1)
}
