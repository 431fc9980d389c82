//! Config-driven runs: data, scaling, reduction, propagation,
//! reconstruction and scoring, with every intermediate artifact on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autoencoder::{self, AeModel, AeSpec, AeTrainConfig};
use crate::dmd;
use crate::linalg::Matrix;
use crate::metrics::{self, ErrorSeries};
use crate::neuralnet::write_history_csv;
use crate::node::{self, NodeArch, NodeModel, NodeTrainConfig};
use crate::ode::SolverSpec;
use crate::pod::{self, FieldBases, LatentTrajectory, PodBasis, TimeNormalization, Truncation};
use crate::rbf::{self, RbfConfig};
use crate::snapstore::{self, Direction, FieldSegment, Granularity, ScalingParams, SnapshotSet, TargetInterval};
use crate::synthgen::{self, GeneratorSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of `compare` workers.
pub const THREADS_ENV: &str = "NIROM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Data,
    Scaling,
    Reduce,
    Propagate,
    Reconstruct,
    Score,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Scaling => "scaling",
            Stage::Reduce => "reduce",
            Stage::Propagate => "propagate",
            Stage::Reconstruct => "reconstruct",
            Stage::Score => "score",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

/// Attaches a stage tag to any displayable error.
pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: fmt::Display> StageContext<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: Stage, message: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError {
        stage,
        message: message.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generator(GeneratorSpec),
    /// Snapshot container; truth for scoring comes from `truth` when given,
    /// otherwise from `path` itself.
    File {
        path: PathBuf,
        #[serde(default)]
        truth: Option<PathBuf>,
    },
}

/// Uniform grid `start + k·dt` for `k = 0..=floor((end − start)/dt)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
    pub dt: f64,
}

impl Window {
    pub fn new(start: f64, end: f64, dt: f64) -> Self {
        Self { start, end, dt }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.start.is_finite() && self.end.is_finite() && self.dt.is_finite()) {
            return Err("window bounds must be finite".into());
        }
        if !(self.dt > 0.0) || self.end <= self.start {
            return Err(format!("window [{}, {}] with dt {} is empty", self.start, self.end, self.dt));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.end - self.start) / self.dt + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.start + k as f64 * self.dt).collect()
    }

    fn tol(&self) -> f64 {
        1e-9 * self.dt.max(self.start.abs().max(self.end.abs()) * 1e-3)
    }

    pub fn last(&self) -> f64 {
        self.start + (self.len() - 1) as f64 * self.dt
    }

    /// Whether `t` lies inside `[start, last grid time]`.
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - self.tol() && t <= self.last() + self.tol()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub target: TargetInterval,
    #[serde(default)]
    pub granularity: Granularity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AePreset {
    #[default]
    Ae1,
    Ae3,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReducerConfig {
    Pod {
        truncation: Truncation,
        #[serde(default)]
        center: bool,
        /// Reduce each field independently and stack the coefficients.
        #[serde(default = "yes")]
        per_field: bool,
    },
    /// One autoencoder per field.
    Ae {
        /// Latent size per field, or a single size used for every field.
        latent: Vec<usize>,
        #[serde(default)]
        preset: AePreset,
        #[serde(default)]
        hidden: Option<Vec<usize>>,
        #[serde(default)]
        depth: Option<usize>,
        #[serde(default)]
        batchnorm: bool,
        train: AeTrainConfig,
    },
}

fn yes() -> bool {
    true
}

/// Named architecture or an explicit one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(String),
    Custom(NodeArch),
}

impl ArchSpec {
    pub fn resolve(&self) -> Result<NodeArch, String> {
        match self {
            ArchSpec::Custom(a) => Ok(a.clone()),
            ArchSpec::Preset(name) => match name.as_str() {
                "node3" => Ok(NodeArch::node3()),
                "node5" => Ok(NodeArch::node5()),
                "linear" => Ok(NodeArch::linear()),
                other => Err(format!("unknown architecture preset {other:?}")),
            },
        }
    }
}

fn rk4_grid() -> SolverSpec {
    SolverSpec::Rk4 { h: None }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropagatorConfig {
    Node {
        arch: ArchSpec,
        train: NodeTrainConfig,
        /// Solver used for prediction.
        #[serde(default = "rk4_grid")]
        solver: SolverSpec,
        /// Divide each latent coordinate by its largest training magnitude.
        #[serde(default = "yes")]
        latent_scaling: bool,
    },
    Rbf {
        #[serde(default)]
        config: RbfConfig,
    },
    Dmd {
        /// `None`: full rank `min(m, M − 1)`.
        #[serde(default)]
        rank: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub scaling: Option<ScalingSpec>,
    pub reducer: ReducerConfig,
    pub propagator: PropagatorConfig,
    pub train_window: Window,
    pub predict_window: Window,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).stage(Stage::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))
            .stage(Stage::Config)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schema_version != SCHEMA_VERSION {
            return fail(
                Stage::Config,
                format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        self.train_window.validate().map_err(|e| format!("train_window: {e}")).stage(Stage::Config)?;
        self.predict_window.validate().map_err(|e| format!("predict_window: {e}")).stage(Stage::Config)?;
        if self.train_window.len() < 2 {
            return fail(Stage::Config, "training window holds fewer than 2 snapshots");
        }
        let k = (self.predict_window.start - self.train_window.start) / self.train_window.dt;
        if !self.train_window.contains(self.predict_window.start) || (k - k.round()).abs() > 1e-6 {
            return fail(Stage::Config, "prediction must start on a training snapshot time");
        }
        match &self.propagator {
            PropagatorConfig::Node { arch, train, solver, .. } => {
                arch.resolve().stage(Stage::Config)?;
                train.optimizer.validate().stage(Stage::Config)?;
                solver.validate().stage(Stage::Config)?;
            }
            PropagatorConfig::Rbf { .. } => {
                substep_ratio(&self.train_window, &self.predict_window)?;
            }
            PropagatorConfig::Dmd { rank } => {
                if *rank == Some(0) {
                    return fail(Stage::Config, "dmd rank must be positive");
                }
            }
        }
        if let ReducerConfig::Ae { latent, train, .. } = &self.reducer {
            if latent.is_empty() || latent.contains(&0) {
                return fail(Stage::Config, "autoencoder latent sizes must be positive");
            }
            train.optimizer.validate().stage(Stage::Config)?;
        }
        Ok(())
    }

    fn label(&self) -> String {
        if self.name.is_empty() {
            "run".into()
        } else {
            self.name.clone()
        }
    }
}

/// Prediction substeps per training step for the RBF stepper.
fn substep_ratio(train: &Window, predict: &Window) -> Result<usize, PipelineError> {
    let s = (train.dt / predict.dt).round();
    if s < 1.0 || (s * predict.dt - train.dt).abs() > 1e-9 * train.dt {
        return fail(
            Stage::Config,
            format!(
                "rbf needs the training step {} to be an integer multiple of the prediction step {}",
                train.dt, predict.dt
            ),
        );
    }
    Ok(s as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducerSummary {
    pub kind: String,
    pub fields: Vec<String>,
    pub latent_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Per-field captured energy fraction (POD).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captured_energy: Option<Vec<f64>>,
    /// Per-field final reconstruction MSE in scaled space (AE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_losses: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorSummary {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Trajectory loss before the first update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    /// Trajectory loss of the trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub count: usize,
    pub first_time: Option<f64>,
    /// One flag per prediction time: outside the training window.
    pub flags: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean_rmse: f64,
    pub max_rmse: f64,
    pub final_rel_err: f64,
    pub mean_rel_err_inside: Option<f64>,
    pub mean_rel_err_outside: Option<f64>,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub data: String,
    pub n_rows: usize,
    pub train_window: Window,
    pub predict_window: Window,
    pub n_train: usize,
    pub n_predict: usize,
    pub reducer: ReducerSummary,
    pub propagator: PropagatorSummary,
    pub extrapolation: Extrapolation,
    pub errors: Option<ErrorSummary>,
    pub artifacts: Vec<String>,
    /// Seconds per stage; excluded from reproducibility comparisons.
    pub wall_times: BTreeMap<String, f64>,
}

impl Summary {
    /// The summary as JSON with `wall_times` removed.
    pub fn reproducible_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        if let Value::Object(map) = &mut v {
            map.remove("wall_times");
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Summary,
    pub errors: Option<ErrorSeries>,
    pub prediction: SnapshotSet<f64>,
    /// Per-epoch NODE losses, empty for other propagators.
    pub node_history: Vec<f64>,
}

enum Reducer {
    Fields(FieldBases<f64>),
    Whole(PodBasis<f64>),
    Ae {
        models: Vec<AeModel<f64>>,
        layout: Vec<FieldSegment>,
        mesh_id: String,
    },
}

impl Reducer {
    fn encode(&self, set: &SnapshotSet<f64>) -> Result<LatentTrajectory<f64>, String> {
        match self {
            Reducer::Fields(fb) => pod::project_fields(fb, set).map_err(|e| e.to_string()),
            Reducer::Whole(b) => pod::project(b, set).map_err(|e| e.to_string()),
            Reducer::Ae { models, layout, .. } => {
                let mut blocks = Vec::with_capacity(models.len());
                for (ae, seg) in models.iter().zip(layout) {
                    let part = set.field_set(seg).map_err(|e| e.to_string())?;
                    blocks.push(ae.encode(part.data(), part.times()).map_err(|e| e.to_string())?.z);
                }
                LatentTrajectory::new(Matrix::vstack(&blocks), set.times().to_vec()).map_err(|e| e.to_string())
            }
        }
    }

    fn decode(&self, latent: &LatentTrajectory<f64>) -> Result<SnapshotSet<f64>, String> {
        match self {
            Reducer::Fields(fb) => pod::reconstruct_fields(fb, latent).map_err(|e| e.to_string()),
            Reducer::Whole(b) => pod::reconstruct(b, latent).map_err(|e| e.to_string()),
            Reducer::Ae {
                models,
                layout,
                mesh_id,
            } => {
                let mut offset = 0;
                let mut blocks = Vec::with_capacity(models.len());
                for ae in models {
                    let k = ae.spec.latent;
                    blocks.push(
                        ae.decode(&latent.z.rows_range(offset, offset + k))
                            .map_err(|e| e.to_string())?,
                    );
                    offset += k;
                }
                SnapshotSet::new(Matrix::vstack(&blocks), latent.times.clone(), layout.clone(), mesh_id.clone())
                    .map_err(|e| e.to_string())
            }
        }
    }
}

/// Columns of `set` at `times` (absolute tolerance `tol`), if all exist.
fn columns_at(set: &SnapshotSet<f64>, times: &[f64], tol: f64) -> Option<SnapshotSet<f64>> {
    let have = set.times();
    let mut idx = Vec::with_capacity(times.len());
    let mut j = 0;
    for &t in times {
        while j < have.len() && have[j] < t - tol {
            j += 1;
        }
        if j == have.len() || (have[j] - t).abs() > tol {
            return None;
        }
        idx.push(j);
    }
    set.select_columns(&idx).ok()
}

fn data_label(src: &DataSource) -> String {
    match src {
        DataSource::Generator(spec) => {
            let kind = serde_json::to_value(&spec.kind)
                .ok()
                .and_then(|v| v.get("kind").and_then(Value::as_str).map(str::to_owned))
                .unwrap_or_default();
            format!("generator:{kind}:seed={}", spec.seed)
        }
        DataSource::File { path, .. } => format!("file:{}", path.display()),
    }
}

fn load_training(cfg: &PipelineConfig) -> Result<SnapshotSet<f64>, PipelineError> {
    let times = cfg.train_window.times();
    match &cfg.data {
        DataSource::Generator(spec) => Ok(synthgen::generate_at::<f64>(spec, &times).stage(Stage::Data)?.0),
        DataSource::File { path, .. } => {
            let set = snapstore::load::<f64>(path)
                .map_err(|e| format!("{}: {e}", path.display()))
                .stage(Stage::Data)?;
            match columns_at(&set, &times, cfg.train_window.tol()) {
                Some(s) => Ok(s),
                None => fail(Stage::Data, "the data file lacks snapshots on the training grid"),
            }
        }
    }
}

fn load_truth(cfg: &PipelineConfig) -> Result<Option<SnapshotSet<f64>>, PipelineError> {
    let times = cfg.predict_window.times();
    match &cfg.data {
        DataSource::Generator(spec) => Ok(Some(synthgen::generate_at::<f64>(spec, &times).stage(Stage::Score)?.0)),
        DataSource::File { path, truth } => {
            let p = truth.as_ref().unwrap_or(path);
            let set = snapstore::load::<f64>(p)
                .map_err(|e| format!("{}: {e}", p.display()))
                .stage(Stage::Score)?;
            Ok(columns_at(&set, &times, cfg.predict_window.tol()))
        }
    }
}

struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Output {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_owned());
        self.dir.join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).stage(Stage::Output)?;
        fs::write(self.path(name), text).stage(Stage::Output)
    }

    fn save_set(&mut self, name: &str, set: &SnapshotSet<f64>, kind: &str, stage: Stage) -> Result<(), PipelineError> {
        snapstore::save_with_manifest(set, self.path(name), Some(kind), Value::Null).stage(stage)
    }
}

fn timed<T>(walls: &mut BTreeMap<String, f64>, key: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    walls.insert(key.to_owned(), start.elapsed().as_secs_f64());
    out
}

/// Marker written to the output directory when a run fails.
pub const FAILURE_MARKER: &str = "FAILED";

/// Runs every stage and writes the artifacts to `cfg.output_dir`. On error
/// a `FAILED` marker naming the stage is written next to whatever was
/// produced before the failure.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| format!("{}: {e}", cfg.output_dir.display()))
        .stage(Stage::Output)?;
    for stale in [FAILURE_MARKER, "summary.json"] {
        let _ = fs::remove_file(cfg.output_dir.join(stale));
    }
    let result = run_stages(cfg);
    if let Err(e) = &result {
        let marker = json!({"stage": e.stage, "message": e.message});
        let _ = fs::write(cfg.output_dir.join(FAILURE_MARKER), marker.to_string());
    }
    result
}

fn run_stages(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut out = Output {
        dir: cfg.output_dir.clone(),
        artifacts: Vec::new(),
    };
    let mut walls = BTreeMap::new();
    let total = Instant::now();
    out.write_json("config.json", cfg)?;

    let train = timed(&mut walls, "data", || load_training(cfg))?;
    let fields: Vec<String> = train.fields().iter().map(|f| f.name.clone()).collect();

    // Scaling: required by autoencoders whose decoder output is bounded.
    let scaling_spec = match (&cfg.reducer, cfg.scaling) {
        (ReducerConfig::Ae { preset, .. }, s) => {
            let need = ae_preset_spec(*preset, 2, 1).scaling_interval();
            match (need, s) {
                (Some(t), None) => Some(ScalingSpec {
                    target: t,
                    granularity: Granularity::PerField,
                }),
                (Some(t), Some(s)) if s.target != t => {
                    return fail(Stage::Scaling, format!("autoencoder output needs scaling to {t:?}, config asks for {:?}", s.target))
                }
                (_, s) => s,
            }
        }
        (_, s) => s,
    };
    let scaling: Option<ScalingParams<f64>> =
        scaling_spec.map(|s| snapstore::fit_scaling(&train, s.target, s.granularity));
    let scaled = match &scaling {
        Some(p) => {
            out.write_json("scaling.json", p)?;
            snapstore::apply_scaling(&train, p, Direction::Forward).stage(Stage::Scaling)?
        }
        None => train.clone(),
    };

    let (reducer, reducer_summary) = timed(&mut walls, "reduce", || reduce(cfg, &scaled, &fields, &mut out))?;
    let latent = reducer.encode(&scaled).stage(Stage::Reduce)?;
    out.save_set("latent_train.nsnp", &latent.to_snapshot_set().stage(Stage::Reduce)?, "latent", Stage::Reduce)?;

    let pred_times = cfg.predict_window.times();
    let k0 = ((cfg.predict_window.start - cfg.train_window.start) / cfg.train_window.dt).round() as usize;
    let (latent_pred, prop_summary, node_history) =
        timed(&mut walls, "propagate", || propagate(cfg, &latent, k0, &pred_times, &mut out))?;
    out.save_set("latent_pred.nsnp", &latent_pred.to_snapshot_set().stage(Stage::Propagate)?, "latent", Stage::Propagate)?;

    let prediction = timed(&mut walls, "reconstruct", || -> Result<_, PipelineError> {
        let pred_scaled = reducer.decode(&latent_pred).stage(Stage::Reconstruct)?;
        match &scaling {
            Some(p) => snapstore::apply_scaling(&pred_scaled, p, Direction::Inverse).stage(Stage::Reconstruct),
            None => Ok(pred_scaled),
        }
    })?;
    out.save_set("prediction.nsnp", &prediction, "prediction", Stage::Reconstruct)?;

    let flags: Vec<bool> = pred_times.iter().map(|&t| !cfg.train_window.contains(t)).collect();
    let extrapolation = Extrapolation {
        count: flags.iter().filter(|&&f| f).count(),
        first_time: flags.iter().position(|&f| f).map(|i| pred_times[i]),
        flags,
    };

    let errors = timed(&mut walls, "score", || -> Result<_, PipelineError> {
        match load_truth(cfg)? {
            Some(truth) => Ok(Some(metrics::spatial_rmse(&truth, &prediction).stage(Stage::Score)?)),
            None => Ok(None),
        }
    })?;
    if let Some(e) = &errors {
        e.write_csv(out.path("errors.csv")).stage(Stage::Output)?;
    }
    let error_summary = errors.as_ref().map(|e| summarize_errors(e, &extrapolation.flags));

    walls.insert("total".into(), total.elapsed().as_secs_f64());
    out.artifacts.push("summary.json".into());
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        seed: cfg.seed,
        data: data_label(&cfg.data),
        n_rows: train.n_rows(),
        train_window: cfg.train_window,
        predict_window: cfg.predict_window,
        n_train: train.n_cols(),
        n_predict: pred_times.len(),
        reducer: reducer_summary,
        propagator: prop_summary,
        extrapolation,
        errors: error_summary,
        artifacts: out.artifacts.clone(),
        wall_times: walls,
    };
    let text = serde_json::to_string_pretty(&summary).stage(Stage::Output)?;
    fs::write(out.dir.join("summary.json"), text).stage(Stage::Output)?;
    Ok(RunReport {
        output_dir: out.dir,
        summary,
        errors,
        prediction,
        node_history,
    })
}

fn summarize_errors(e: &ErrorSeries, outside: &[bool]) -> ErrorSummary {
    let agg = e.aggregate();
    let n = agg.rmse.len() as f64;
    let mean_where = |flag: bool| {
        let v: Vec<f64> = agg
            .rel_err
            .iter()
            .zip(outside)
            .filter(|(_, &f)| f == flag)
            .map(|(&r, _)| r)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    ErrorSummary {
        mean_rmse: agg.rmse.iter().sum::<f64>() / n,
        max_rmse: agg.rmse.iter().copied().fold(0.0, f64::max),
        final_rel_err: *agg.rel_err.last().unwrap_or(&0.0),
        mean_rel_err_inside: mean_where(false),
        mean_rel_err_outside: mean_where(true),
        finite: e.is_finite(),
    }
}

fn ae_preset_spec(preset: AePreset, input: usize, latent: usize) -> AeSpec {
    match preset {
        AePreset::Ae1 => AeSpec::ae1(input, latent),
        AePreset::Ae3 => AeSpec::ae3(input, latent),
        AePreset::Linear => AeSpec::linear(input, latent),
    }
}

fn reduce(
    cfg: &PipelineConfig,
    scaled: &SnapshotSet<f64>,
    fields: &[String],
    out: &mut Output,
) -> Result<(Reducer, ReducerSummary), PipelineError> {
    match &cfg.reducer {
        ReducerConfig::Pod {
            truncation,
            center,
            per_field,
        } => {
            let (reducer, dims, energy) = if *per_field {
                let fb = pod::compute_field_bases(scaled, *truncation, *center).stage(Stage::Reduce)?;
                for (b, name) in fb.bases.iter().zip(fields) {
                    pod::save_basis(b, out.path(&format!("basis_{name}.nsnp"))).stage(Stage::Reduce)?;
                }
                let energy = fb.bases.iter().map(|b| b.captured_energy()).collect();
                (Reducer::Fields(fb.clone()), fb.modes(), energy)
            } else {
                let b = pod::compute_basis(scaled, *truncation, *center).stage(Stage::Reduce)?;
                pod::save_basis(&b, out.path("basis.nsnp")).stage(Stage::Reduce)?;
                let (m, e) = (b.modes(), b.captured_energy());
                (Reducer::Whole(b), vec![m], vec![e])
            };
            let summary = ReducerSummary {
                kind: "pod".into(),
                fields: if *per_field { fields.to_vec() } else { vec!["all".into()] },
                latent_dim: dims.iter().sum(),
                latent_dims: dims,
                captured_energy: Some(energy),
                final_losses: None,
            };
            Ok((reducer, summary))
        }
        ReducerConfig::Ae {
            latent,
            preset,
            hidden,
            depth,
            batchnorm,
            train,
        } => {
            let segs = scaled.fields();
            if latent.len() != 1 && latent.len() != segs.len() {
                return fail(
                    Stage::Config,
                    format!("{} latent sizes for {} fields", latent.len(), segs.len()),
                );
            }
            let mut models = Vec::with_capacity(segs.len());
            let mut losses = Vec::with_capacity(segs.len());
            for (i, seg) in segs.iter().enumerate() {
                let k = if latent.len() == 1 { latent[0] } else { latent[i] };
                let mut spec = ae_preset_spec(*preset, seg.length, k);
                if hidden.is_some() {
                    spec.hidden = hidden.clone();
                }
                if let Some(d) = depth {
                    spec.depth = *d;
                }
                spec.batchnorm = *batchnorm;
                let part = scaled.field_set(seg).stage(Stage::Reduce)?;
                let mut ae = autoencoder::build::<f64>(spec, cfg.seed.wrapping_add(i as u64))
                    .map_err(|e| format!("field {}: {e}", seg.name))
                    .stage(Stage::Reduce)?;
                ae.train(part.data(), train)
                    .map_err(|e| format!("field {}: {e}", seg.name))
                    .stage(Stage::Reduce)?;
                autoencoder::save_ae(&ae, out.dir.join(format!("ae_{}", seg.name))).stage(Stage::Reduce)?;
                out.artifacts.push(format!("ae_{}.enc", seg.name));
                out.artifacts.push(format!("ae_{}.dec", seg.name));
                write_history_csv(&ae.history, &out.path(&format!("ae_{}_history.csv", seg.name)))
                    .stage(Stage::Output)?;
                losses.push(ae.final_loss.unwrap_or(f64::NAN));
                models.push(ae);
            }
            let dims: Vec<usize> = models.iter().map(|m| m.spec.latent).collect();
            let summary = ReducerSummary {
                kind: "ae".into(),
                fields: fields.to_vec(),
                latent_dim: dims.iter().sum(),
                latent_dims: dims,
                captured_energy: None,
                final_losses: Some(losses),
            };
            Ok((
                Reducer::Ae {
                    models,
                    layout: segs.to_vec(),
                    mesh_id: scaled.mesh_id().to_owned(),
                },
                summary,
            ))
        }
    }
}

fn propagate(
    cfg: &PipelineConfig,
    latent: &LatentTrajectory<f64>,
    k0: usize,
    times: &[f64],
    out: &mut Output,
) -> Result<(LatentTrajectory<f64>, PropagatorSummary, Vec<f64>), PipelineError> {
    let st = Stage::Propagate;
    match &cfg.propagator {
        PropagatorConfig::Node {
            arch,
            train,
            solver,
            latent_scaling,
        } => {
            let arch = arch.resolve().stage(Stage::Config)?;
            let m = latent.dim();
            let scale: Vec<f64> = (0..m)
                .map(|i| {
                    let s = (0..latent.len()).map(|j| latent.z[(i, j)].abs()).fold(0.0, f64::max);
                    if *latent_scaling && s > 0.0 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            let data = LatentTrajectory {
                z: Matrix::from_fn(m, latent.len(), |i, j| latent.z[(i, j)] / scale[i]),
                times: latent.times.clone(),
                normalization: TimeNormalization::None,
            };
            let mut model =
                NodeModel::<f64>::new(arch, m, *solver, cfg.seed.wrapping_add(1_000)).stage(st)?;
            let history = node::train_node(&mut model, &data, train).stage(st)?;
            node::save_node(&model, out.path("node.ckpt")).stage(st)?;
            write_history_csv(&history, &out.path("node_history.csv")).stage(Stage::Output)?;
            out.write_json("latent_scale.json", &scale)?;

            let norm = LatentTrajectory {
                z: data.z.clone(),
                times: data.times.iter().map(|&t| model.time_map.forward(t)).collect(),
                normalization: TimeNormalization::UnitInterval,
            };
            let final_loss = node::trajectory_loss(&model, &norm, &train.solver).stage(st)?;
            let initial = history.first().map(|r| r.loss);

            let z0: Vec<f64> = data.z.col(k0).to_vec();
            let pred = model.predict(&z0, times).stage(st)?;
            let z = Matrix::from_fn(m, pred.len(), |i, j| pred.z[(i, j)] * scale[i]);
            let summary = PropagatorSummary {
                kind: "node".into(),
                epochs: Some(train.epochs),
                initial_loss: initial,
                final_loss: Some(final_loss),
                loss_reduction: initial.map(|l| l / final_loss),
                rank: None,
                spectral_radius: None,
            };
            let losses = history.iter().map(|r| r.loss).collect();
            Ok((finish(z, times)?, summary, losses))
        }
        PropagatorConfig::Rbf { config } => {
            let model = rbf::fit(latent, config).stage(st)?;
            rbf::save_rbf(&model, out.path("rbf.nsnp")).stage(st)?;
            let s = substep_ratio(&cfg.train_window, &cfg.predict_window)?;
            let n_steps = (times.len() - 1).div_ceil(s);
            let pred = model.predict(latent.z.col(k0), times[0], n_steps, s).stage(st)?;
            let z = pred.z.columns_range(0, times.len());
            let summary = PropagatorSummary {
                kind: "rbf".into(),
                epochs: None,
                initial_loss: None,
                final_loss: None,
                loss_reduction: None,
                rank: None,
                spectral_radius: None,
            };
            Ok((finish(z, times)?, summary, Vec::new()))
        }
        PropagatorConfig::Dmd { rank } => {
            let max = latent.dim().min(latent.len() - 1);
            let r = rank.unwrap_or(max);
            let model = dmd::fit(&latent.z, &latent.times, r).stage(st)?;
            dmd::save_dmd(&model, out.path("dmd.json")).stage(st)?;
            model.write_spectrum_csv(out.path("dmd_spectrum.csv")).stage(st)?;
            let z = model.predict(times).stage(st)?;
            let summary = PropagatorSummary {
                kind: "dmd".into(),
                epochs: None,
                initial_loss: None,
                final_loss: None,
                loss_reduction: None,
                rank: Some(r),
                spectral_radius: Some(model.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max)),
            };
            Ok((finish(z, times)?, summary, Vec::new()))
        }
    }
}

fn finish(z: Matrix<f64>, times: &[f64]) -> Result<LatentTrajectory<f64>, PipelineError> {
    LatentTrajectory::new(z, times.to_vec()).stage(Stage::Propagate)
}

/// Worker count: `NIROM_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub reports: Vec<RunReport>,
}

/// Runs several configs over the same data and windows on up to `threads`
/// workers. Run `i` writes to `<out_dir>/<i>_<name>`; the aggregate errors
/// are merged into `<out_dir>/comparison.csv`.
pub fn compare(configs: &[PipelineConfig], out_dir: &Path, threads: usize) -> Result<Comparison, PipelineError> {
    let Some(first) = configs.first() else {
        return fail(Stage::Config, "no configs to compare");
    };
    for c in configs {
        c.validate()?;
        if c.data != first.data || c.train_window != first.train_window || c.predict_window != first.predict_window {
            return fail(
                Stage::Config,
                format!("config {:?} differs from {:?} in data or windows", c.name, first.name),
            );
        }
    }
    let labels: Vec<String> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i:02}_{}", c.label()))
        .collect();
    let jobs: Vec<PipelineConfig> = configs
        .iter()
        .zip(&labels)
        .map(|(c, l)| PipelineConfig {
            output_dir: out_dir.join(l),
            ..c.clone()
        })
        .collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport, PipelineError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i]);
                results.lock().expect("result slot")[i] = Some(r);
            });
        }
    });
    let mut reports = Vec::with_capacity(jobs.len());
    for (r, l) in results.into_inner().expect("results").into_iter().zip(&labels) {
        match r.expect("every job ran") {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                return Err(PipelineError {
                    stage: e.stage,
                    message: format!("{l}: {}", e.message),
                })
            }
        }
    }
    let times = first.predict_window.times();
    let mut header = vec!["time".to_string()];
    for l in &labels {
        header.push(format!("{l}_rmse"));
        header.push(format!("{l}_rel_err"));
    }
    let series: Vec<&ErrorSeries> = reports
        .iter()
        .zip(&labels)
        .map(|(r, l)| r.errors.as_ref().ok_or_else(|| format!("{l} has no truth to score against")))
        .collect::<Result<_, _>>()
        .stage(Stage::Score)?;
    let mut w = csv::Writer::from_path(out_dir.join("comparison.csv")).stage(Stage::Output)?;
    w.write_record(&header).stage(Stage::Output)?;
    for (k, t) in times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for e in &series {
            let agg = e.aggregate();
            row.push(agg.rmse[k].to_string());
            row.push(agg.rel_err[k].to_string());
        }
        w.write_record(&row).stage(Stage::Output)?;
    }
    w.flush().stage(Stage::Output)?;
    Ok(Comparison { labels, times, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_grid_and_membership() {
        let w = Window::new(2.5, 2.5 + 312.0 * 0.008, 0.008);
        assert_eq!(w.len(), 313);
        let p = Window::new(2.5, 5.5, 0.002);
        assert_eq!(p.len(), 1501);
        assert!(w.contains(4.996));
        assert!(!w.contains(4.998));
        assert!(Window::new(1.0, 1.0, 0.1).validate().is_err());
    }

    #[test]
    fn stage_tags_and_schema_check() {
        let e = PipelineConfig::from_json("{}").unwrap_err();
        assert_eq!(e.stage, Stage::Config);
        let text = r#"{
            "schema_version": 2,
            "data": {"generator": {"kind": "traveling_wave", "speed": 1.0, "width": 2.0, "n": 16, "m": 4, "dt": 0.1}},
            "reducer": {"kind": "pod", "truncation": {"criterion": "fixed", "modes": 2}},
            "propagator": {"kind": "dmd"},
            "train_window": {"start": 0.0, "end": 1.0, "dt": 0.1},
            "predict_window": {"start": 0.0, "end": 1.0, "dt": 0.1},
            "output_dir": "out"
        }"#;
        let e = PipelineConfig::from_json(text).unwrap_err();
        assert!(e.to_string().starts_with("[config] schema_version 2"));
    }
}
