//! Probabilistic 2D scan matching.
//!
//! Estimates the relative rigid-body transform between two LiDAR scans by
//! treating point-to-surface data association and the pose as jointly
//! unknown. Association uncertainty is marginalized with loopy sum-product
//! belief propagation over a bipartite assignment graph; the pose posterior
//! is integrated with Monte Carlo samples drawn from a box prior and then
//! sharpened by a local MAP refinement on the (x, y, theta) chart.
//!
//! The crate also ships the supporting cast needed to evaluate the matcher
//! end to end: a segment-map LiDAR simulator with range/bearing noise and
//! uniform polar clutter, surface normal estimation, NDT and IMLS-style
//! baseline matchers, and a drift benchmark harness with deterministic,
//! seed-reproducible reports.

pub mod baselines;
pub mod bp;
pub mod cloud;
pub mod harness;
pub mod inference;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod se2;
pub mod sim;

pub use baselines::{imls_match, ndt_match, BaselineError, ImlsConfig, NdtGrid};
pub use bp::{run_bp, BeliefTable, BpConfig, BpOutcome, MessageState};
pub use harness::{
    accumulate_trajectory, compute_quantile, emit_report, run_benchmark, write_timing,
    BenchmarkReport, ExperimentConfig, HarnessError, Method, RuntimeStats,
};
pub use cloud::{estimate_normals, SourceCloud, SurfaceCloud};
pub use inference::{match_scans, MatchConfig, MatchError, MatchResult, PosePrior};
pub use model::{AssociabilityModel, ClutterModel, ErrorModel, MeasurementModels};
pub use oracle::{run_checks, CheckReport};
pub use se2::{HomogeneousPoint, Pose, PoseChart};
pub use sim::{SegmentMap, SensorSpec, TrajectorySpec};
