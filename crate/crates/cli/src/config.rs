//! Run configuration: a TOML document, every field optional, unknown keys
//! rejected. The document and then the flag overrides are merged onto the
//! serialized defaults before the result is typed, so a flag and the
//! equivalent config entry behave identically.

use std::path::{Path, PathBuf};

use cellrender::attenuation::{AttenuationField, Squash};
use cellrender::geometry::CylindricalGrid;
use cellrender::kernels::{KernelSpec, SeparableKernel};
use cellrender::optim::Optimizer;
use cellrender::renderer::{
    CellKernel, CellTemplate, Channel, ParamClass, PlanarLayout, RenderOptions, SensorGrid,
};
use cellrender::scene::{ClutterSpec, Primitive};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every random draw of a run derives from this seed through ChaCha8.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub render: RenderOptions,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub grad_check: GradCheckConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    Planar {
        rows: usize,
        cols: usize,
        #[serde(default = "one")]
        half_extent: f64,
        #[serde(default = "plane_z")]
        plane_z: f64,
    },
    Cylindrical {
        rows: usize,
        cols: usize,
        #[serde(default)]
        full_circle: bool,
    },
}

fn one() -> f64 {
    1.0
}
fn plane_z() -> f64 {
    -1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub topology: TopologyConfig,
    pub cell: CellTemplate,
    pub channels: Vec<Channel>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let mut cell = CellTemplate::new(CellKernel::Separable(SeparableKernel {
            lateral: KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 0.1 },
            depth: KernelSpec::TriangularDepth,
        }));
        cell.elongation = 0.4;
        cell.attenuation = Some(AttenuationField::neutral(3, 0.0, 2.4, Squash::Softsign));
        Self {
            topology: TopologyConfig::Planar { rows: 16, cols: 16, half_extent: 1.0, plane_z: plane_z() },
            cell,
            channels: vec![Channel::Range, Channel::Depth { far: 0.0 }, Channel::DENSITY],
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> cellrender::Result<SensorGrid> {
        match self.topology {
            TopologyConfig::Planar { rows, cols, half_extent, plane_z } => {
                SensorGrid::planar(rows, cols, PlanarLayout { half_extent, plane_z }, &self.cell, self.channels.clone())
            }
            TopologyConfig::Cylindrical { rows, cols, full_circle } => {
                SensorGrid::cylindrical(CylindricalGrid { rows, cols, full_circle }, &self.cell, self.channels.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Load this cloud (text or `.cpts`) instead of sampling `primitive`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_primitive")]
    pub primitive: Primitive,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Center and scale the object into the unit ball.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Its `seed` is derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clutter: Option<ClutterSpec>,
    /// Rotate the object by this angle about a random axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_angle: Option<f64>,
    /// Deform the object with a 4×4 planar TPS grid of this σ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps_sigma: Option<f64>,
}

fn default_primitive() -> Primitive {
    Primitive::LBracket { length: 1.0, height: 0.6, depth: 0.4, thickness: 0.15 }
}
fn default_points() -> usize {
    2000
}
fn yes() -> bool {
    true
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            input: None,
            primitive: default_primitive(),
            points: default_points(),
            normalize: true,
            clutter: None,
            rotation_angle: None,
            tps_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    /// Target from a CRND file, or else the render of the unperturbed object.
    ImageMse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<PathBuf>,
    },
    ClutterSuppression,
    ChannelEnergy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    #[serde(default = "default_loss")]
    pub loss: LossConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_weights: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<ParamClass>>,
    /// Geometric transform optimized with the cell parameters.
    #[serde(default)]
    pub transform: TransformKind,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub frame_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    #[default]
    None,
    Rotation,
    Tps,
}

fn default_loss() -> LossConfig {
    LossConfig::ImageMse { target: None }
}
fn default_steps() -> usize {
    50
}
fn default_optimizer() -> Optimizer {
    Optimizer::Sgd { lr: 1.0, backtracking: true }
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            loss: default_loss(),
            channel_weights: None,
            steps: default_steps(),
            optimizer: default_optimizer(),
            trainable: None,
            transform: TransformKind::None,
            snapshot_every: 0,
            frame_every: 0,
        }
    }
}

/// A small smooth configuration checked by `grad-check`, unless
/// `use_run_setup` selects the run's own grid and scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(default = "fd_step")]
    pub step: f64,
    #[serde(default = "fd_tol")]
    pub tol: f64,
    #[serde(default = "yes")]
    pub include_points: bool,
    #[serde(default)]
    pub use_run_setup: bool,
    #[serde(default = "gc_rows")]
    pub rows: usize,
    #[serde(default = "gc_rows")]
    pub cols: usize,
    #[serde(default = "gc_points")]
    pub points: usize,
    #[serde(default = "gc_transform")]
    pub transform: TransformKind,
}

fn fd_step() -> f64 {
    1e-4
}
fn fd_tol() -> f64 {
    1e-4
}
fn gc_rows() -> usize {
    4
}
fn gc_points() -> usize {
    20
}
fn gc_transform() -> TransformKind {
    TransformKind::Rotation
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: fd_step(),
            tol: fd_tol(),
            include_points: true,
            use_run_setup: false,
            rows: gc_rows(),
            cols: gc_rows(),
            points: gc_points(),
            transform: gc_transform(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "bench_points")]
    pub points: usize,
    #[serde(default = "bench_side")]
    pub rows: usize,
    #[serde(default = "bench_side")]
    pub cols: usize,
    /// Lateral support radius of the benchmark kernel.
    #[serde(default = "bench_radius")]
    pub radius: f64,
    #[serde(default = "bench_repeats")]
    pub repeats: usize,
}

fn bench_points() -> usize {
    100_000
}
fn bench_side() -> usize {
    64
}
fn bench_radius() -> f64 {
    1.0 / 32.0
}
fn bench_repeats() -> usize {
    3
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { points: bench_points(), rows: bench_side(), cols: bench_side(), radius: bench_radius(), repeats: bench_repeats() }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses `path` (or an empty document), applies `overrides` as
/// `dotted.key = toml value` assignments, and types the result.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let name = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(format!("{name}: {e}")))?;
    let mut sparse = user.clone();
    for (key, value) in overrides {
        set_path(&mut sparse, key, value.clone())?;
    }
    // Typing the document alone reports misspelled keys with their line;
    // missing fields are expected there and filled from the defaults below.
    if let Err(e) = toml::from_str::<RunConfig>(&text) {
        if e.message().starts_with("unknown") {
            return Err(ConfigError(format!("{name}: {e}")));
        }
    }
    let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| ConfigError(format!("defaults: {e}")))?;
    let mut merged = toml::Value::Table(defaults);
    merge(&mut merged, toml::Value::Table(sparse));
    let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError(format!("{name}: {e}")))?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Keys whose value selects an enum variant.
const TAGS: [&str; 4] = ["type", "kind", "family", "shape"];

/// Overlays `top` onto `base`. A table that names a different variant, or
/// an externally tagged variant disjoint from the base one, replaces the
/// base instead of merging into it.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) if !replaces(b, &t) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn replaces(base: &toml::Table, top: &toml::Table) -> bool {
    let retagged = TAGS.iter().any(|k| matches!((base.get(*k), top.get(*k)), (Some(a), Some(b)) if a != b));
    let external = base.len() == 1 && !top.is_empty() && top.keys().all(|k| !base.contains_key(k));
    retagged || external
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError(format!("override {key}: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is TOML, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let err = |field: &str, e: String| ConfigError(format!("{field}: {e}"));
    cfg.grid.build().map_err(|e| err("grid", e.to_string()))?;
    if cfg.threads == Some(0) {
        return Err(err("threads", "must be ≥ 1".into()));
    }
    cfg.scene.primitive.validate().map_err(|e| err("scene.primitive", e.to_string()))?;
    if let Some(p) = &cfg.scene.input {
        if !p.is_file() {
            return Err(err("scene.input", format!("{} does not exist", p.display())));
        }
    }
    if cfg.scene.input.is_none() && cfg.scene.points == 0 {
        return Err(err("scene.points", "must be ≥ 1".into()));
    }
    if let Some(c) = &cfg.scene.clutter {
        c.validate().map_err(|e| err("scene.clutter", e.to_string()))?;
    }
    if let Some(s) = cfg.scene.tps_sigma {
        if !(s.is_finite() && s >= 0.0) {
            return Err(err("scene.tps_sigma", format!("must be ≥ 0, got {s}")));
        }
    }
    if cfg.scene.rotation_angle.is_some_and(|a| !a.is_finite()) {
        return Err(err("scene.rotation_angle", "must be finite".into()));
    }
    if cfg.optimize.steps == 0 {
        return Err(err("optimize.steps", "must be ≥ 1".into()));
    }
    cfg.optimize.optimizer.validate().map_err(|e| err("optimize.optimizer", e.to_string()))?;
    if let Some(w) = &cfg.optimize.channel_weights {
        if w.len() != cfg.grid.channels.len() {
            return Err(err("optimize.channel_weights", format!("{} weights for {} channels", w.len(), cfg.grid.channels.len())));
        }
    }
    let g = &cfg.grad_check;
    if !(g.step > 0.0 && g.step.is_finite() && g.tol > 0.0) {
        return Err(err("grad_check", "step and tol must be > 0".into()));
    }
    if g.rows == 0 || g.cols == 0 || g.points == 0 {
        return Err(err("grad_check", "rows, cols and points must be ≥ 1".into()));
    }
    let b = &cfg.bench;
    if b.points == 0 || b.rows == 0 || b.cols == 0 || b.repeats == 0 || !(b.radius > 0.0) {
        return Err(err("bench", "points, rows, cols, repeats and radius must be positive".into()));
    }
    Ok(())
}
