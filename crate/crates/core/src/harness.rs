//! Benchmark harness: experiment configuration, the Monte Carlo drift
//! benchmark over a simulated trajectory, quantile aggregation, and report
//! emission.
//!
//! A benchmark run simulates `n_mc` independent trials of the same
//! trajectory, matches every consecutive scan pair with each enabled
//! method, and aggregates relative pose errors into quantiles. Everything
//! downstream of the config is deterministic: the report and CSV files are
//! byte-identical across runs and thread counts. Wall-clock timings are
//! returned separately so they never leak into the deterministic outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{imls_match, ndt_match, ImlsConfig};
use crate::cloud::{estimate_normals, SourceCloud};
use crate::inference::{match_scans, MatchConfig, PosePrior, Refiner};
use crate::model::{AssociabilityModel, ClutterModel, ErrorModel, MeasurementModels};
use crate::rng::{derive_seed, Domain};
use crate::se2::{rotation_error, translation_error, Pose, PoseChart};
use crate::sim::{
    demo_map, demo_waypoints, generate_trajectory, load_waypoints, relative_motion, scan_indexed,
    ClutterSpec, SegmentMap, SensorSpec, SimError, TrajectorySpec,
};

pub const CONFIG_SCHEMA: &str = "bp-scanmatch-config/1";
pub const REPORT_SCHEMA: &str = "bp-scanmatch-report/1";

/// Fraction of measured frames a method may fail before the whole run is
/// flagged degraded.
const DEGRADED_FAILURE_FRACTION: (usize, usize) = (1, 10);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("quantile of an empty series")]
    EmptySeries,
    #[error("quantile level {0} outside [0, 100]")]
    BadQuantile(f64),
    #[error("report serialization: {0}")]
    Serialize(serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    Ndt,
    Imls,
}

impl Method {
    /// Stable identifier used in file names and CSV rows.
    pub fn key(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ndt => "ndt",
            Method::Imls => "imls",
        }
    }

    /// Human-facing name. The simplified IMLS matcher is labeled as a
    /// variant so nobody mistakes it for the full published pipeline.
    pub fn label(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ndt => "NDT",
            Method::Imls => "IMLS-style",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Full description of a benchmark run. Parses from JSON with every field
/// optional; unknown fields are rejected so typos fail loudly instead of
/// silently falling back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Pinned generator family; the only accepted value is "chacha8".
    pub rng: String,
    pub seed: u64,
    /// Monte Carlo trials.
    pub n_mc: usize,
    /// Cap on matched frames per trial; `None` runs the full trajectory.
    pub max_frames: Option<usize>,
    /// Segment map file; `None` uses the built-in corridor world.
    pub map_path: Option<PathBuf>,
    pub trajectory: TrajectoryConfig,
    pub sensor: SensorConfig,
    pub clutter: ClutterConfig,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.to_string(),
            rng: "chacha8".to_string(),
            seed: 0,
            n_mc: 100,
            max_frames: None,
            map_path: None,
            trajectory: TrajectoryConfig::default(),
            sensor: SensorConfig::default(),
            clutter: ClutterConfig::default(),
            model: ModelConfig::default(),
            inference: InferenceConfig::default(),
            methods: vec![Method::Proposed, Method::Ndt, Method::Imls],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Inline waypoint list; mutually exclusive with `waypoints_path`.
    /// Both `None` selects the built-in corridor loop.
    pub waypoints: Option<Vec<[f64; 2]>>,
    pub waypoints_path: Option<PathBuf>,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Time between scans, seconds.
    pub scan_period: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            waypoints: None,
            waypoints_path: None,
            speed: 10.0,
            scan_period: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub angular_resolution_deg: f64,
    pub max_range: f64,
    /// Range noise, meters (one sigma).
    pub sigma_range: f64,
    /// Bearing noise, degrees (one sigma).
    pub sigma_bearing_deg: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            angular_resolution_deg: 1.0,
            max_range: 100.0,
            sigma_range: 0.05,
            sigma_bearing_deg: 0.5,
        }
    }
}

/// Clutter injected by the simulator, independent of the clutter rate the
/// models assume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterConfig {
    pub lambda_na: f64,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        ClutterConfig { lambda_na: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Point-to-plane residual scale, meters.
    pub sigma_e: f64,
    /// Prior probability that a source point has a counterpart.
    pub f_a: f64,
    /// Clutter rate the measurement model assumes.
    pub lambda_na: f64,
    /// Neighborhood radius for normal estimation; also sets the kernel
    /// width of the IMLS-style baseline.
    pub d_th: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sigma_e: 0.03,
            f_a: 0.8,
            lambda_na: 1.0,
            d_th: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Pose samples drawn from the prior.
    pub n_p: usize,
    /// Association message-passing iteration cap.
    pub n_da: usize,
    pub bp_tol: f64,
    pub damping: f64,
    /// Refinement iteration cap.
    pub n_it: usize,
    pub pruning: bool,
    pub refiner: Refiner,
    pub prior: PriorConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            n_p: 2000,
            n_da: 200,
            bp_tol: 1e-8,
            damping: 0.0,
            n_it: 100,
            pruning: true,
            refiner: Refiner::NelderMead,
            prior: PriorConfig::default(),
        }
    }
}

/// Box prior on the relative pose, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub theta_deg: [f64; 2],
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            x: [-10.0, 10.0],
            y: [-10.0, 10.0],
            theta_deg: [-90.0, 90.0],
        }
    }
}

fn config_err<T>(message: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(message.into()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| HarnessError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema != CONFIG_SCHEMA {
            return config_err(format!(
                "unsupported schema {:?}, expected {:?}",
                self.schema, CONFIG_SCHEMA
            ));
        }
        if self.rng != "chacha8" {
            return config_err(format!("unsupported rng {:?}, expected \"chacha8\"", self.rng));
        }
        if self.n_mc == 0 {
            return config_err("n_mc must be at least 1");
        }
        if self.max_frames == Some(0) {
            return config_err("max_frames must be at least 1 when set");
        }
        if self.methods.is_empty() {
            return config_err("methods must list at least one matcher");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return config_err(format!("method {m} listed twice"));
            }
        }

        let t = &self.trajectory;
        if t.waypoints.is_some() && t.waypoints_path.is_some() {
            return config_err("set either trajectory.waypoints or trajectory.waypoints_path, not both");
        }
        if let Some(w) = &t.waypoints {
            if w.len() < 2 {
                return config_err("trajectory.waypoints needs at least two points");
            }
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return config_err("trajectory.waypoints must be finite");
            }
        }
        if !(t.speed.is_finite() && t.speed > 0.0) {
            return config_err("trajectory.speed must be positive");
        }
        if !(t.scan_period.is_finite() && t.scan_period > 0.0) {
            return config_err("trajectory.scan_period must be positive");
        }

        self.sensor_spec()
            .validate()
            .map_err(|e| HarnessError::Config(format!("sensor: {e}")))?;
        if !(self.clutter.lambda_na.is_finite() && self.clutter.lambda_na >= 0.0) {
            return config_err("clutter.lambda_na must be non-negative");
        }

        let m = &self.model;
        if !(m.sigma_e.is_finite() && m.sigma_e > 0.0) {
            return config_err("model.sigma_e must be positive");
        }
        if !(m.f_a.is_finite() && m.f_a > 0.0 && m.f_a <= 1.0) {
            return config_err("model.f_a must lie in (0, 1]");
        }
        // The association weights divide by the clutter density, so the
        // model-side rate must be strictly positive even in clutter-free
        // simulations.
        if !(m.lambda_na.is_finite() && m.lambda_na > 0.0) {
            return config_err("model.lambda_na must be positive");
        }
        if !(m.d_th.is_finite() && m.d_th > 0.0) {
            return config_err("model.d_th must be positive");
        }

        let inf = &self.inference;
        if inf.n_p == 0 {
            return config_err("inference.n_p must be at least 1");
        }
        if inf.n_da == 0 {
            return config_err("inference.n_da must be at least 1");
        }
        if !(inf.bp_tol.is_finite() && inf.bp_tol > 0.0) {
            return config_err("inference.bp_tol must be positive");
        }
        if !(inf.damping.is_finite() && (0.0..1.0).contains(&inf.damping)) {
            return config_err("inference.damping must lie in [0, 1)");
        }
        if inf.n_it == 0 {
            return config_err("inference.n_it must be at least 1");
        }
        let p = &inf.prior;
        for (name, [lo, hi]) in [("x", p.x), ("y", p.y), ("theta_deg", p.theta_deg)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return config_err(format!("inference.prior.{name} must be a non-empty interval"));
            }
        }
        if p.theta_deg[0] < -180.0 || p.theta_deg[1] > 180.0 {
            return config_err("inference.prior.theta_deg must lie within [-180, 180]");
        }
        Ok(())
    }

    pub fn sensor_spec(&self) -> SensorSpec {
        SensorSpec {
            angular_resolution: self.sensor.angular_resolution_deg.to_radians(),
            max_range: self.sensor.max_range,
            sigma_range: self.sensor.sigma_range,
            sigma_bearing: self.sensor.sigma_bearing_deg.to_radians(),
        }
    }

    pub fn clutter_spec(&self) -> ClutterSpec {
        ClutterSpec {
            lambda_na: self.clutter.lambda_na,
        }
    }

    pub fn measurement_models(&self) -> MeasurementModels {
        MeasurementModels {
            error: ErrorModel::new(self.model.sigma_e),
            assoc: AssociabilityModel::new(self.model.f_a),
            clutter: ClutterModel::new(self.model.lambda_na, self.sensor.max_range),
        }
    }

    /// Matcher configuration for one frame; only the seed varies per frame.
    pub fn match_config(&self, seed: u64) -> MatchConfig {
        let p = &self.inference.prior;
        let mut config = MatchConfig {
            models: self.measurement_models(),
            prior: PosePrior::new(
                (p.x[0], p.x[1]),
                (p.y[0], p.y[1]),
                (p.theta_deg[0].to_radians(), p.theta_deg[1].to_radians()),
            ),
            n_p: self.inference.n_p,
            n_it: self.inference.n_it,
            pruning: self.inference.pruning,
            refiner: self.inference.refiner,
            seed,
            ..MatchConfig::default()
        };
        config.bp.max_iters = self.inference.n_da;
        config.bp.tol = self.inference.bp_tol;
        config.bp.damping = self.inference.damping;
        config
    }

    pub fn load_map(&self) -> Result<SegmentMap, HarnessError> {
        match &self.map_path {
            None => Ok(demo_map()),
            Some(path) => Ok(SegmentMap::load(path)?),
        }
    }

    pub fn load_waypoints(&self) -> Result<Vec<Vector2<f64>>, HarnessError> {
        match (&self.trajectory.waypoints, &self.trajectory.waypoints_path) {
            (Some(w), _) => Ok(w.iter().map(|p| Vector2::new(p[0], p[1])).collect()),
            (None, Some(path)) => Ok(load_waypoints(path)?),
            (None, None) => Ok(demo_waypoints()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricQuantiles {
    pub e_trans: QuantilePair,
    pub e_rot: QuantilePair,
}

/// One matched frame's errors. `None` metrics mean the matcher failed;
/// `note` carries the failure reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub trial: usize,
    /// 1-based frame index within the trial.
    pub frame: usize,
    pub e_trans: Option<f64>,
    pub e_rot: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub label: String,
    /// Frames where the matcher returned an error.
    pub failures: usize,
    /// `None` when no frame produced a measurable estimate.
    pub quantiles: Option<MetricQuantiles>,
    pub errors: Vec<FrameError>,
    /// Trial-0 estimated poses chained from the trajectory start. Failed
    /// or skipped frames contribute an identity step.
    pub trajectory: Vec<PoseChart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    pub seed: u64,
    pub n_trials: usize,
    pub frames_per_trial: usize,
    /// Frames that produced metrics: trials x frames minus skips.
    pub measured_frames: usize,
    /// Frames whose true translation is exactly zero; relative errors are
    /// undefined there, so they are skipped and counted.
    pub zero_translation_skips: usize,
    /// Set when any method fails more than a tenth of the measured frames.
    pub degraded: bool,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
    /// Ground truth chained from the trajectory start, same frame as the
    /// per-method trajectories.
    pub truth_trajectory: Vec<PoseChart>,
}

/// Wall-clock accounting, kept out of [`BenchmarkReport`] so the report
/// files stay byte-deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub per_method_seconds: BTreeMap<String, f64>,
}

struct MethodOutcome {
    est: Option<PoseChart>,
    e_trans: Option<f64>,
    e_rot: Option<f64>,
    note: Option<String>,
    seconds: f64,
}

struct FrameOutcome {
    /// 1-based frame index within the trial.
    frame: usize,
    zero_translation: bool,
    /// Aligned with the configured method list; empty when skipped.
    methods: Vec<MethodOutcome>,
}

struct TrialOutput {
    trial: usize,
    frames: Vec<FrameOutcome>,
}

/// Relative pose errors of an estimate against a nonzero-translation truth.
fn measure(est: &Pose, truth: &Pose) -> Option<(f64, f64)> {
    let e_trans = translation_error(est, truth).ok()?;
    let e_rot = rotation_error(est, truth).ok()?;
    Some((e_trans, e_rot))
}

fn run_trial(
    config: &ExperimentConfig,
    map: &SegmentMap,
    trajectory: &[Pose],
    truth_steps: &[Pose],
    frames: usize,
    trial: usize,
) -> TrialOutput {
    let trial_seed = derive_seed(config.seed, Domain::Trial, trial as u64);
    let sensor = config.sensor_spec();
    let clutter = config.clutter_spec();
    let scans: Vec<SourceCloud> = (0..=frames)
        .map(|k| scan_indexed(map, &trajectory[k], &sensor, &clutter, trial_seed, k as u64))
        .collect();

    let template = config.match_config(0);
    let imls_config = ImlsConfig::new(config.model.d_th);
    let identity = Pose::identity();

    let mut outcomes = Vec::with_capacity(frames);
    for k in 1..=frames {
        let truth = &truth_steps[k - 1];
        if truth.trans().norm() == 0.0 {
            outcomes.push(FrameOutcome {
                frame: k,
                zero_translation: true,
                methods: Vec::new(),
            });
            continue;
        }
        let surface = estimate_normals(scans[k - 1].points(), config.model.d_th);
        let frame_seed = derive_seed(trial_seed, Domain::Frame, k as u64);
        let methods = config
            .methods
            .iter()
            .map(|&method| {
                let begun = Instant::now();
                let est = match method {
                    Method::Proposed => {
                        let mut match_config = template.clone();
                        match_config.seed = frame_seed;
                        match_scans(&scans[k], &surface, &match_config)
                            .map(|r| r.pose())
                            .map_err(|e| e.to_string())
                    }
                    Method::Ndt => ndt_match(&scans[k], scans[k - 1].points(), &identity)
                        .map_err(|e| e.to_string()),
                    Method::Imls => imls_match(&scans[k], &surface, &imls_config, &identity)
                        .map_err(|e| e.to_string()),
                };
                let seconds = begun.elapsed().as_secs_f64();
                match est {
                    Ok(pose) => {
                        let (e_trans, e_rot) =
                            measure(&pose, truth).expect("zero-translation frames are skipped");
                        MethodOutcome {
                            est: Some(pose.chart()),
                            e_trans: Some(e_trans),
                            e_rot: Some(e_rot),
                            note: None,
                            seconds,
                        }
                    }
                    Err(note) => MethodOutcome {
                        est: None,
                        e_trans: None,
                        e_rot: None,
                        note: Some(note),
                        seconds,
                    },
                }
            })
            .collect();
        outcomes.push(FrameOutcome {
            frame: k,
            zero_translation: false,
            methods,
        });
    }
    TrialOutput {
        trial,
        frames: outcomes,
    }
}

fn assemble_report(
    config: &ExperimentConfig,
    frames_per_trial: usize,
    truth_steps: &[Pose],
    trials: &[TrialOutput],
) -> BenchmarkReport {
    let total_frames = trials.len() * frames_per_trial;
    let zero_translation_skips = trials
        .iter()
        .flat_map(|t| &t.frames)
        .filter(|f| f.zero_translation)
        .count();
    let measured_frames = total_frames - zero_translation_skips;
    let mut degraded = measured_frames == 0;
    let (num, den) = DEGRADED_FAILURE_FRACTION;

    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let mut errors = Vec::with_capacity(measured_frames);
            let mut trans_series = Vec::with_capacity(measured_frames);
            let mut rot_series = Vec::with_capacity(measured_frames);
            let mut failures = 0;
            for trial in trials {
                for frame in &trial.frames {
                    if frame.zero_translation {
                        continue;
                    }
                    let outcome = &frame.methods[mi];
                    if outcome.note.is_some() {
                        failures += 1;
                    }
                    if let Some(v) = outcome.e_trans {
                        trans_series.push(v);
                    }
                    if let Some(v) = outcome.e_rot {
                        rot_series.push(v);
                    }
                    errors.push(FrameError {
                        trial: trial.trial,
                        frame: frame.frame,
                        e_trans: outcome.e_trans,
                        e_rot: outcome.e_rot,
                        note: outcome.note.clone(),
                    });
                }
            }
            if failures * den > measured_frames * num {
                degraded = true;
            }
            let quantiles = if trans_series.is_empty() {
                None
            } else {
                let q = |series: &[f64], level: f64| {
                    compute_quantile(series, level).expect("series is non-empty and NaN-free")
                };
                Some(MetricQuantiles {
                    e_trans: QuantilePair {
                        q50: q(&trans_series, 50.0),
                        q95: q(&trans_series, 95.0),
                    },
                    e_rot: QuantilePair {
                        q50: q(&rot_series, 50.0),
                        q95: q(&rot_series, 95.0),
                    },
                })
            };
            let steps: Vec<Pose> = trials[0]
                .frames
                .iter()
                .map(|frame| {
                    frame
                        .methods
                        .get(mi)
                        .and_then(|o| o.est.as_ref())
                        .map(Pose::from_chart)
                        .unwrap_or_else(Pose::identity)
                })
                .collect();
            let trajectory = accumulate_trajectory(&steps)
                .iter()
                .map(Pose::chart)
                .collect();
            MethodReport {
                method,
                label: method.label().to_string(),
                failures,
                quantiles,
                errors,
                trajectory,
            }
        })
        .collect();

    let truth_trajectory = accumulate_trajectory(truth_steps)
        .iter()
        .map(Pose::chart)
        .collect();

    BenchmarkReport {
        schema: REPORT_SCHEMA.to_string(),
        seed: config.seed,
        n_trials: trials.len(),
        frames_per_trial,
        measured_frames,
        zero_translation_skips,
        degraded,
        config: config.clone(),
        methods,
        truth_trajectory,
    }
}

/// Runs the full benchmark. Trials execute in parallel but are merged in
/// trial order, so the report does not depend on the thread count.
pub fn run_benchmark(
    config: &ExperimentConfig,
) -> Result<(BenchmarkReport, RuntimeStats), HarnessError> {
    config.validate()?;
    let started = Instant::now();

    let map = config.load_map()?;
    let waypoints = config.load_waypoints()?;
    let trajectory = generate_trajectory(&TrajectorySpec {
        waypoints,
        speed: config.trajectory.speed,
        scan_period: config.trajectory.scan_period,
    })?;
    let mut frames = trajectory.len() - 1;
    if let Some(cap) = config.max_frames {
        frames = frames.min(cap);
    }
    if frames == 0 {
        return config_err("trajectory yields no frames to match");
    }
    let truth_steps: Vec<Pose> = (1..=frames)
        .map(|k| relative_motion(&trajectory[k - 1], &trajectory[k]))
        .collect();

    let trials: Vec<TrialOutput> = (0..config.n_mc)
        .into_par_iter()
        .map(|trial| run_trial(config, &map, &trajectory, &truth_steps, frames, trial))
        .collect();

    let mut per_method_seconds: BTreeMap<String, f64> = config
        .methods
        .iter()
        .map(|m| (m.key().to_string(), 0.0))
        .collect();
    for trial in &trials {
        for frame in &trial.frames {
            for (mi, outcome) in frame.methods.iter().enumerate() {
                *per_method_seconds
                    .get_mut(config.methods[mi].key())
                    .expect("outcomes align with configured methods") += outcome.seconds;
            }
        }
    }

    let report = assemble_report(config, frames, &truth_steps, &trials);
    let runtime = RuntimeStats {
        total_seconds: started.elapsed().as_secs_f64(),
        per_method_seconds,
    };
    Ok((report, runtime))
}

/// Lower empirical quantile: the smallest value with at least `q` percent
/// of the series at or below it. No interpolation, so every returned value
/// is an observed one. NaNs are excluded; an all-NaN or empty series is an
/// error.
pub fn compute_quantile(values: &[f64], q: f64) -> Result<f64, HarnessError> {
    if !q.is_finite() || !(0.0..=100.0).contains(&q) {
        return Err(HarnessError::BadQuantile(q));
    }
    let mut kept: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if kept.is_empty() {
        return Err(HarnessError::EmptySeries);
    }
    kept.sort_by(|a, b| a.partial_cmp(b).expect("NaNs were filtered out"));
    // q * n stays exact in floating point for integer-valued q, unlike
    // (q / 100) * n.
    let rank = (q * kept.len() as f64 / 100.0).ceil() as usize;
    Ok(kept[rank.max(1) - 1])
}

/// Chains relative poses into a trajectory anchored at the identity, so
/// entry `k` is the pose of frame `k` relative to frame 0. Output length is
/// `steps.len() + 1`.
pub fn accumulate_trajectory(steps: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    out.push(Pose::identity());
    for step in steps {
        let next = out.last().expect("never empty").compose(step);
        out.push(next);
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(HarnessError::Serialize)?;
    text.push('\n');
    Ok(text)
}

/// Writes `report.json`, `errors.csv`, `quantiles.csv`, and one trajectory
/// CSV per method plus the ground truth. Returns the written paths.
/// Identical reports produce byte-identical files.
pub fn emit_report(report: &BenchmarkReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let report_path = out_dir.join("report.json");
    write_file(&report_path, &to_pretty_json(report)?)?;
    written.push(report_path);

    // Frame column is the global trial-major index; failed frames carry NaN.
    let mut errors_csv = String::from("frame,method,e_trans,e_rot\n");
    let per_method: Vec<_> = report.methods.iter().map(|m| m.errors.iter()).collect();
    let mut rows: Vec<(usize, usize, &FrameError)> = Vec::new();
    for (mi, errors) in per_method.into_iter().enumerate() {
        for e in errors {
            let global = e.trial * report.frames_per_trial + (e.frame - 1);
            rows.push((global, mi, e));
        }
    }
    rows.sort_by_key(|&(global, mi, _)| (global, mi));
    for (global, mi, e) in rows {
        let method = report.methods[mi].method;
        let e_trans = e.e_trans.unwrap_or(f64::NAN);
        let e_rot = e.e_rot.unwrap_or(f64::NAN);
        errors_csv.push_str(&format!("{global},{method},{e_trans},{e_rot}\n"));
    }
    let errors_path = out_dir.join("errors.csv");
    write_file(&errors_path, &errors_csv)?;
    written.push(errors_path);

    let mut quantiles_csv = String::from("method,metric,quantile,value\n");
    for m in &report.methods {
        let (t50, t95, r50, r95) = match &m.quantiles {
            Some(q) => (q.e_trans.q50, q.e_trans.q95, q.e_rot.q50, q.e_rot.q95),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        for (metric, level, value) in [
            ("e_trans", 50, t50),
            ("e_trans", 95, t95),
            ("e_rot", 50, r50),
            ("e_rot", 95, r95),
        ] {
            quantiles_csv.push_str(&format!("{},{metric},{level},{value}\n", m.method));
        }
    }
    let quantiles_path = out_dir.join("quantiles.csv");
    write_file(&quantiles_path, &quantiles_csv)?;
    written.push(quantiles_path);

    let trajectory_csv = |charts: &[PoseChart]| {
        let mut csv = String::from("k,x,y,theta\n");
        for (k, c) in charts.iter().enumerate() {
            csv.push_str(&format!("{k},{},{},{}\n", c.x, c.y, c.theta));
        }
        csv
    };
    for m in &report.methods {
        let path = out_dir.join(format!("trajectory_{}.csv", m.method));
        write_file(&path, &trajectory_csv(&m.trajectory))?;
        written.push(path);
    }
    let truth_path = out_dir.join("trajectory_truth.csv");
    write_file(&truth_path, &trajectory_csv(&report.truth_trajectory))?;
    written.push(truth_path);

    Ok(written)
}

/// Writes wall-clock stats to `timing.json`, separate from the
/// deterministic report files.
pub fn write_timing(stats: &RuntimeStats, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = out_dir.join("timing.json");
    write_file(&path, &to_pretty_json(stats)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;
    use std::sync::OnceLock;

    fn quantile(values: &[f64], q: f64) -> f64 {
        compute_quantile(values, q).unwrap()
    }

    #[test]
    fn quantile_matches_the_pinned_examples() {
        assert_eq!(quantile(&[5.0], 50.0), 5.0);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&hundred, 95.0), 95.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 100.0], 50.0), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 100.0], 95.0), 100.0);
        assert_eq!(quantile(&[2.0, 1.0], 0.0), 1.0);
        assert_eq!(quantile(&[2.0, 1.0], 100.0), 2.0);
        assert_eq!(quantile(&[f64::NAN, 3.0, 1.0], 50.0), 1.0);
        assert!(matches!(
            compute_quantile(&[], 50.0),
            Err(HarnessError::EmptySeries)
        ));
        assert!(matches!(
            compute_quantile(&[f64::NAN], 50.0),
            Err(HarnessError::EmptySeries)
        ));
        assert!(matches!(
            compute_quantile(&[1.0], 101.0),
            Err(HarnessError::BadQuantile(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Oracle: scan the sorted series for the first value covering q% of
        // the mass.
        #[test]
        fn quantile_agrees_with_the_scan_definition(
            values in proptest::collection::vec(-1e6f64..1e6, 1..48),
            q in 0u8..=100,
        ) {
            let q = f64::from(q);
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let expected = *sorted
                .iter()
                .enumerate()
                .find(|(i, _)| ((i + 1) * 100) as f64 >= q * n as f64)
                .map(|(_, v)| v)
                .unwrap_or_else(|| sorted.last().unwrap());
            prop_assert_eq!(quantile(&values, q), expected);
        }
    }

    #[test]
    fn accumulate_starts_at_identity_and_composes_in_order() {
        assert_eq!(accumulate_trajectory(&[]).len(), 1);
        assert!(accumulate_trajectory(&[])[0].trans().norm() == 0.0);

        // A one-meter advance, a quarter turn, then another advance that now
        // points along +y.
        let steps = [
            Pose::from_xytheta(1.0, 0.0, FRAC_PI_2),
            Pose::from_xytheta(1.0, 0.0, 0.0),
        ];
        let out = accumulate_trajectory(&steps);
        assert_eq!(out.len(), 3);
        let end = out[2].chart();
        assert_abs_diff_eq!(end.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.theta, FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn accumulated_truth_steps_rebuild_the_trajectory() {
        let spec = TrajectorySpec {
            waypoints: demo_waypoints(),
            speed: 10.0,
            scan_period: 0.08,
        };
        let trajectory = generate_trajectory(&spec).unwrap();
        let poses = &trajectory[..12];
        let steps: Vec<Pose> = (1..poses.len())
            .map(|k| relative_motion(&poses[k - 1], &poses[k]))
            .collect();
        for (k, accumulated) in accumulate_trajectory(&steps).iter().enumerate() {
            let rebuilt = poses[0].compose(accumulated).chart();
            let truth = poses[k].chart();
            assert_abs_diff_eq!(rebuilt.x, truth.x, epsilon = 1e-9);
            assert_abs_diff_eq!(rebuilt.y, truth.y, epsilon = 1e-9);
            assert_abs_diff_eq!(rebuilt.theta, truth.theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn default_config_parses_from_empty_json_and_validates() {
        let config: ExperimentConfig = serde_json::from_str("{}").unwrap();
        config.validate().unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.n_mc, 100);
        assert_eq!(
            config.methods,
            vec![Method::Proposed, Method::Ndt, Method::Imls]
        );
        assert_eq!(config.sensor_spec().beam_count(), 360);
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = ExperimentConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn config_rejects_bad_values() {
        let cases: &[(&str, &str)] = &[
            (r#"{"schema": "bp-scanmatch-config/2"}"#, "schema"),
            (r#"{"rng": "xoshiro"}"#, "rng"),
            (r#"{"n_mc": 0}"#, "n_mc"),
            (r#"{"max_frames": 0}"#, "max_frames"),
            (r#"{"methods": []}"#, "methods"),
            (r#"{"methods": ["ndt", "ndt"]}"#, "twice"),
            (
                r#"{"trajectory": {"waypoints": [[0,0],[1,0]], "waypoints_path": "w.csv"}}"#,
                "not both",
            ),
            (r#"{"trajectory": {"waypoints": [[0,0]]}}"#, "two points"),
            (r#"{"trajectory": {"speed": 0.0}}"#, "speed"),
            (r#"{"sensor": {"angular_resolution_deg": 0.7}}"#, "sensor"),
            (r#"{"clutter": {"lambda_na": -1.0}}"#, "lambda_na"),
            (r#"{"model": {"sigma_e": 0.0}}"#, "sigma_e"),
            (r#"{"model": {"f_a": 1.2}}"#, "f_a"),
            (r#"{"model": {"lambda_na": 0.0}}"#, "lambda_na"),
            (r#"{"inference": {"n_p": 0}}"#, "n_p"),
            (r#"{"inference": {"damping": 1.0}}"#, "damping"),
            (
                r#"{"inference": {"prior": {"theta_deg": [-200.0, 90.0]}}}"#,
                "theta_deg",
            ),
            (
                r#"{"inference": {"prior": {"x": [1.0, 1.0]}}}"#,
                "non-empty interval",
            ),
        ];
        for (text, needle) in cases {
            let config: ExperimentConfig =
                serde_json::from_str(text).unwrap_or_else(|e| panic!("parse {text}: {e}"));
            let err = config.validate().unwrap_err().to_string();
            assert!(
                err.contains(needle),
                "expected {needle:?} in error for {text}, got {err:?}"
            );
        }
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"frames": 3}"#).is_err());
    }

    #[test]
    fn metrics_match_the_pose_error_definitions() {
        let truth = Pose::from_xytheta(0.8, -0.1, 0.05);
        let est = Pose::from_xytheta(0.78, -0.08, 0.06);
        let (e_trans, e_rot) = measure(&est, &truth).unwrap();
        assert_eq!(e_trans, translation_error(&est, &truth).unwrap());
        assert_eq!(e_rot, rotation_error(&est, &truth).unwrap());
        assert!(measure(&est, &Pose::from_xytheta(0.0, 0.0, 0.3)).is_none());
    }

    // Beam spacing must stay under the 2 m normal-estimation radius at the
    // configured max range, or the destination surfaces degenerate: 3
    // degrees at 30 m gives at most 1.6 m between neighboring wall hits.
    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.seed = 7;
        config.n_mc = 2;
        config.max_frames = Some(2);
        // A straight stretch of the corridor keeps the scans short.
        config.trajectory.waypoints = Some(vec![[-47.0, -32.0], [-40.0, -32.0]]);
        config.sensor.angular_resolution_deg = 3.0;
        config.sensor.max_range = 30.0;
        config.inference.n_p = 120;
        config.inference.n_da = 30;
        config.inference.n_it = 25;
        config
    }

    fn tiny_run() -> &'static (BenchmarkReport, RuntimeStats) {
        static RUN: OnceLock<(BenchmarkReport, RuntimeStats)> = OnceLock::new();
        RUN.get_or_init(|| run_benchmark(&tiny_config()).unwrap())
    }

    #[test]
    fn benchmark_report_shape_matches_the_run() {
        let (report, runtime) = tiny_run();
        assert_eq!(report.schema, REPORT_SCHEMA);
        assert_eq!(report.n_trials, 2);
        assert_eq!(report.frames_per_trial, 2);
        assert_eq!(report.zero_translation_skips, 0);
        assert_eq!(report.measured_frames, 4);
        assert_eq!(report.methods.len(), 3);
        for m in &report.methods {
            assert_eq!(m.errors.len(), 4);
            assert_eq!(m.trajectory.len(), 3);
            let q = m.quantiles.as_ref().unwrap();
            assert!(q.e_trans.q50 <= q.e_trans.q95);
            assert!(q.e_rot.q50 <= q.e_rot.q95);
        }
        assert_eq!(report.truth_trajectory.len(), 3);
        assert!(!report.degraded);
        assert!(runtime.per_method_seconds.len() == 3);
        assert!(runtime.total_seconds > 0.0);
    }

    #[test]
    fn report_config_echo_reloads_through_the_parser() {
        let (report, _) = tiny_run();
        let text = to_pretty_json(report).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let echoed: ExperimentConfig =
            serde_json::from_value(value["config"].clone()).unwrap();
        echoed.validate().unwrap();
        assert_eq!(&echoed, &report.config);
        assert_eq!(&echoed, &tiny_config());
    }

    #[test]
    fn emitted_files_are_byte_identical_across_runs() {
        let (first, _) = tiny_run();
        let (second, _) = run_benchmark(&tiny_config()).unwrap();
        assert_eq!(first, &second);

        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let paths_a = emit_report(first, dir_a.path()).unwrap();
        let paths_b = emit_report(&second, dir_b.path()).unwrap();
        assert_eq!(paths_a.len(), paths_b.len());
        let names: Vec<_> = paths_a
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(
            names,
            vec![
                "report.json",
                "errors.csv",
                "quantiles.csv",
                "trajectory_proposed.csv",
                "trajectory_ndt.csv",
                "trajectory_imls.csv",
                "trajectory_truth.csv",
            ]
        );
        for (a, b) in paths_a.iter().zip(&paths_b) {
            let bytes_a = fs::read(a).unwrap();
            let bytes_b = fs::read(b).unwrap();
            assert_eq!(bytes_a, bytes_b, "{names:?} differ");
        }

        let errors_csv = fs::read_to_string(dir_a.path().join("errors.csv")).unwrap();
        let lines: Vec<&str> = errors_csv.lines().collect();
        assert_eq!(lines[0], "frame,method,e_trans,e_rot");
        assert_eq!(lines.len(), 1 + 4 * 3);
        // Trial-major global frame index, methods in configured order.
        assert!(lines[1].starts_with("0,proposed,"));
        assert!(lines[2].starts_with("0,ndt,"));
        assert!(lines[3].starts_with("0,imls,"));
        assert!(lines[10].starts_with("3,proposed,"));

        let quantiles_csv = fs::read_to_string(dir_a.path().join("quantiles.csv")).unwrap();
        assert_eq!(quantiles_csv.lines().count(), 1 + 3 * 4);

        let truth_csv = fs::read_to_string(dir_a.path().join("trajectory_truth.csv")).unwrap();
        assert_eq!(truth_csv.lines().next().unwrap(), "k,x,y,theta");
        assert_eq!(truth_csv.lines().count(), 1 + 3);
    }

    // Regenerate with:
    //   cargo test -p bp-scanmatch rewrite_golden_report -- --ignored
    #[test]
    fn golden_report_bytes_are_frozen() {
        let (report, _) = tiny_run();
        let text = to_pretty_json(report).unwrap();
        let golden = include_str!("../tests/data/golden_report.json");
        assert_eq!(text, golden, "report bytes drifted from the golden file");
    }

    #[test]
    #[ignore = "writes the golden report file"]
    fn rewrite_golden_report() {
        let (report, _) = tiny_run();
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_report.json");
        fs::write(&path, to_pretty_json(report).unwrap()).unwrap();
    }

    #[test]
    fn noiseless_single_frame_benchmark_recovers_the_motion() {
        let mut config = ExperimentConfig::default();
        config.seed = 1;
        config.n_mc = 1;
        config.max_frames = Some(1);
        config.trajectory.waypoints = Some(vec![[-47.0, -32.0], [-40.0, -32.0]]);
        config.sensor.sigma_range = 0.0;
        config.sensor.sigma_bearing_deg = 0.0;
        config.clutter.lambda_na = 0.0;
        let (report, _) = run_benchmark(&config).unwrap();
        assert!(!report.degraded);
        for m in &report.methods {
            assert_eq!(m.failures, 0);
            let e_trans = m.errors[0].e_trans.unwrap();
            match m.method {
                Method::Proposed => {
                    assert!(e_trans < 0.01, "proposed e_trans {e_trans}");
                }
                // The grid matcher sees nearly identical walls before and
                // after a 0.8 m slide down the corridor, and its covariance
                // floor leaves no gradient along the stretch: it stays at
                // the identity, which scores close to the full motion.
                Method::Ndt => {
                    assert!(e_trans > 0.5 && e_trans < 1.5, "ndt e_trans {e_trans}");
                }
                // Plane projection slides freely along the corridor walls,
                // so the along-track component is only weakly observed.
                Method::Imls => {
                    assert!(e_trans < 0.5, "imls e_trans {e_trans}");
                }
            }
        }
    }

    fn synthetic_trial(trial: usize, outcomes: Vec<FrameOutcome>) -> TrialOutput {
        TrialOutput {
            trial,
            frames: outcomes,
        }
    }

    fn ok_outcome(e: f64) -> MethodOutcome {
        MethodOutcome {
            est: Some(Pose::from_xytheta(0.8, 0.0, 0.0).chart()),
            e_trans: Some(e),
            e_rot: Some(e / 10.0),
            note: None,
            seconds: 0.0,
        }
    }

    fn failed_outcome() -> MethodOutcome {
        MethodOutcome {
            est: None,
            e_trans: None,
            e_rot: None,
            note: Some("no overlap between the clouds".to_string()),
            seconds: 0.0,
        }
    }

    #[test]
    fn zero_translation_frames_are_excluded_and_counted() {
        let mut config = ExperimentConfig::default();
        config.methods = vec![Method::Ndt];
        let truth_steps = [Pose::from_xytheta(0.0, 0.0, 0.1), Pose::from_xytheta(0.8, 0.0, 0.0)];
        let trials = [synthetic_trial(
            0,
            vec![
                FrameOutcome {
                    frame: 1,
                    zero_translation: true,
                    methods: Vec::new(),
                },
                FrameOutcome {
                    frame: 2,
                    zero_translation: false,
                    methods: vec![ok_outcome(0.02)],
                },
            ],
        )];
        let report = assemble_report(&config, 2, &truth_steps, &trials);
        assert_eq!(report.zero_translation_skips, 1);
        assert_eq!(report.measured_frames, 1);
        assert!(!report.degraded);
        let m = &report.methods[0];
        assert_eq!(m.errors.len(), 1);
        assert_eq!(m.errors[0].frame, 2);
        assert_eq!(m.quantiles.as_ref().unwrap().e_trans.q50, 0.02);
        // The skipped frame contributes an identity step to the trajectory.
        assert_eq!(m.trajectory.len(), 3);
        assert_abs_diff_eq!(m.trajectory[1].x, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(m.trajectory[2].x, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn excess_failures_flag_the_benchmark_as_degraded() {
        let mut config = ExperimentConfig::default();
        config.methods = vec![Method::Imls];
        let truth_steps: Vec<Pose> = (0..10).map(|_| Pose::from_xytheta(0.8, 0.0, 0.0)).collect();
        let build = |n_failed: usize| {
            let outcomes = (1..=10)
                .map(|k| FrameOutcome {
                    frame: k,
                    zero_translation: false,
                    methods: vec![if k <= n_failed {
                        failed_outcome()
                    } else {
                        ok_outcome(0.03)
                    }],
                })
                .collect();
            [synthetic_trial(0, outcomes)]
        };
        let fine = assemble_report(&config, 10, &truth_steps, &build(1));
        assert_eq!(fine.methods[0].failures, 1);
        assert!(!fine.degraded);
        let degraded = assemble_report(&config, 10, &truth_steps, &build(2));
        assert_eq!(degraded.methods[0].failures, 2);
        assert!(degraded.degraded);
        assert_eq!(degraded.methods[0].errors[0].e_trans, None);
        assert!(degraded.methods[0].errors[0].note.is_some());
    }
}
