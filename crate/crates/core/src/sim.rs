//! Synthetic 2D LiDAR over segment maps.
//!
//! The world is a set of line segments. A scan casts one beam per angular
//! step over the full circle, perturbs each hit in polar coordinates (range
//! and bearing noise are independent Gaussians), and appends a Poisson
//! number of clutter points drawn uniformly in range and bearing. Points are
//! emitted in the sensor frame, beam returns first, clutter after, so a
//! fixed RNG stream reproduces a scan bit for bit.

use crate::cloud::SourceCloud;
use crate::rng::{stream, Domain};
use crate::se2::Pose;
use nalgebra::Vector2;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

const MAP_HEADER: &str = "# bp-scanmatch map v1";
const TRAJECTORY_HEADER: &str = "# bp-scanmatch trajectory v1";

/// Ray-segment hits closer than this are treated as the ray grazing its own
/// origin and ignored.
const EPS_T: f64 = 1e-12;

/// Slack on the segment parameter so beams that strike a segment endpoint
/// (e.g. a room corner) survive floating-point jitter.
const EPS_U: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unrecognized header {found:?}")]
    BadHeader { found: String },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("segment {0} has zero length")]
    DegenerateSegment(usize),
    #[error("segment {0} has a non-finite endpoint")]
    NonFinite(usize),
    #[error("trajectory needs at least two distinct waypoints")]
    DegenerateTrajectory,
    #[error("invalid sensor spec: {0}")]
    BadSensor(String),
}

/// Wall segment from `a` to `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentMap {
    segments: Vec<Segment>,
}

impl SegmentMap {
    pub fn new(segments: Vec<Segment>) -> Result<Self, SimError> {
        for (i, s) in segments.iter().enumerate() {
            let finite = [s.a.x, s.a.y, s.b.x, s.b.y].iter().all(|v| v.is_finite());
            if !finite {
                return Err(SimError::NonFinite(i));
            }
            if (s.b - s.a).norm() == 0.0 {
                return Err(SimError::DegenerateSegment(i));
            }
        }
        Ok(SegmentMap { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            None => return SegmentMap::new(Vec::new()),
            Some(h) => {
                let h = h?;
                if h.trim_end() != MAP_HEADER {
                    return Err(SimError::BadHeader { found: h });
                }
            }
        }
        let mut segments = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = parse_row(&line, 4, idx + 2)?;
            segments.push(Segment {
                a: Vector2::new(row[0], row[1]),
                b: Vector2::new(row[2], row[3]),
            });
        }
        SegmentMap::new(segments)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let mut out = String::new();
        out.push_str(MAP_HEADER);
        out.push('\n');
        for s in &self.segments {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt(s.a.x),
                fmt(s.a.y),
                fmt(s.b.x),
                fmt(s.b.y)
            );
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_row(line: &str, arity: usize, lineno: usize) -> Result<Vec<f64>, SimError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != arity {
        return Err(SimError::Line {
            line: lineno,
            msg: format!("expected {arity} fields, got {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            let v: f64 = f.trim().parse().map_err(|_| SimError::Line {
                line: lineno,
                msg: format!("not a number: {f:?}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(SimError::Line {
                    line: lineno,
                    msg: format!("non-finite value: {f:?}"),
                })
            }
        })
        .collect()
}

/// Beam pattern and polar noise of the scanner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSpec {
    /// Angular step between beams, radians. Must divide the full circle.
    pub angular_resolution: f64,
    pub max_range: f64,
    pub sigma_range: f64,
    /// Bearing noise, radians.
    pub sigma_bearing: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            angular_resolution: 1f64.to_radians(),
            max_range: 100.0,
            sigma_range: 0.05,
            sigma_bearing: 0.5f64.to_radians(),
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.angular_resolution > 0.0) {
            return Err(SimError::BadSensor("angular resolution must be positive".into()));
        }
        let n = TAU / self.angular_resolution;
        if (n - n.round()).abs() > 1e-9 {
            return Err(SimError::BadSensor(
                "angular resolution must divide the full circle".into(),
            ));
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::BadSensor("max range must be positive".into()));
        }
        if self.sigma_range < 0.0 || self.sigma_bearing < 0.0 {
            return Err(SimError::BadSensor("noise sigmas must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn beam_count(&self) -> usize {
        (TAU / self.angular_resolution).round() as usize
    }
}

/// Expected number of uniform polar clutter points per scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterSpec {
    pub lambda_na: f64,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        ClutterSpec { lambda_na: 1.0 }
    }
}

/// Smallest positive distance at which the ray from `origin` along world
/// angle `bearing` strikes a map segment, if any within `max_range`.
pub fn raycast(
    map: &SegmentMap,
    origin: &Vector2<f64>,
    bearing: f64,
    max_range: f64,
) -> Option<f64> {
    let dir = Vector2::new(bearing.cos(), bearing.sin());
    raycast_dir(map, origin, &dir, max_range)
}

fn raycast_dir(
    map: &SegmentMap,
    origin: &Vector2<f64>,
    dir: &Vector2<f64>,
    max_range: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for s in &map.segments {
        let e = s.b - s.a;
        let denom = cross(dir, &e);
        if denom.abs() < 1e-15 {
            // Parallel (collinear grazing included): no usable hit.
            continue;
        }
        let ap = s.a - origin;
        let t = cross(&ap, &e) / denom;
        let u = cross(&ap, dir) / denom;
        if t > EPS_T && (-EPS_U..=1.0 + EPS_U).contains(&u) && t <= max_range {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// One full revolution from `pose`, in the sensor frame. Beam returns come
/// first in bearing order, clutter after; hits at exactly `max_range` are
/// dropped (no max-range returns).
pub fn scan(
    map: &SegmentMap,
    pose: &Pose,
    sensor: &SensorSpec,
    clutter: &ClutterSpec,
    rng: &mut ChaCha8Rng,
) -> SourceCloud {
    sensor.validate().expect("invalid sensor spec");
    assert!(clutter.lambda_na >= 0.0, "negative clutter rate");
    let range_noise = Normal::new(0.0, sensor.sigma_range).unwrap();
    let bearing_noise = Normal::new(0.0, sensor.sigma_bearing).unwrap();

    let mut points = Vec::new();
    let origin = *pose.trans();
    for k in 0..sensor.beam_count() {
        let bearing = k as f64 * sensor.angular_resolution;
        let dir = pose.rotate(&Vector2::new(bearing.cos(), bearing.sin()));
        if let Some(r) = raycast_dir(map, &origin, &dir, sensor.max_range) {
            if r >= sensor.max_range {
                continue;
            }
            let r_meas = r + range_noise.sample(rng);
            let b_meas = bearing + bearing_noise.sample(rng);
            points.push(Vector2::new(r_meas * b_meas.cos(), r_meas * b_meas.sin()));
        }
    }
    if clutter.lambda_na > 0.0 {
        let count = Poisson::new(clutter.lambda_na).unwrap().sample(rng) as usize;
        for _ in 0..count {
            let r = rng.random_range(0.0..sensor.max_range);
            let theta = rng.random_range(0.0..TAU);
            points.push(Vector2::new(r * theta.cos(), r * theta.sin()));
        }
    }
    SourceCloud::new(points).expect("scan produced non-finite point")
}

/// Convenience wrapper deriving the per-scan RNG stream from
/// `(seed, scan_index)`.
pub fn scan_indexed(
    map: &SegmentMap,
    pose: &Pose,
    sensor: &SensorSpec,
    clutter: &ClutterSpec,
    seed: u64,
    scan_index: u64,
) -> SourceCloud {
    let mut rng = stream(seed, Domain::Scan, scan_index);
    scan(map, pose, sensor, clutter, &mut rng)
}

/// Waypoint polyline plus motion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Vector2<f64>>,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Time between scans, seconds.
    pub scan_period: f64,
}

/// Poses sampled every `speed * scan_period` meters of arc length along the
/// polyline, heading along the local segment direction. A sample landing
/// exactly on a vertex takes the outgoing segment's heading, so headings
/// jump at corners. Returned poses map sensor coordinates to world
/// coordinates.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose>, SimError> {
    assert!(spec.speed > 0.0 && spec.scan_period > 0.0, "motion must advance");
    let w = &spec.waypoints;
    if w.len() < 2 {
        return Err(SimError::DegenerateTrajectory);
    }
    let mut cum = vec![0.0];
    for i in 1..w.len() {
        let len = (w[i] - w[i - 1]).norm();
        if len == 0.0 {
            return Err(SimError::DegenerateTrajectory);
        }
        cum.push(cum[i - 1] + len);
    }
    let total = *cum.last().unwrap();
    let step = spec.speed * spec.scan_period;
    let count = (total / step).floor() as usize + 1;

    let mut poses = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = k as f64 * step;
        // Monotone in k; advance to the segment with cum[seg] <= s < cum[seg+1].
        // Advancing on equality puts vertex samples on the outgoing segment;
        // the final sample (s == total) stays on the last one.
        while seg + 2 < cum.len() && s >= cum[seg + 1] {
            seg += 1;
        }
        let dir = w[seg + 1] - w[seg];
        let heading = dir.y.atan2(dir.x);
        let t = ((s - cum[seg]) / (cum[seg + 1] - cum[seg])).min(1.0);
        let pos = w[seg] + dir * t;
        poses.push(Pose::from_xytheta(pos.x, pos.y, heading));
    }
    Ok(poses)
}

/// Transform taking current-scan sensor coordinates into previous-scan
/// sensor coordinates, for trajectory poses expressed sensor-to-world. This
/// is the quantity a matcher between the two scans estimates, and chaining
/// it frame by frame reproduces the trajectory relative to its start.
pub fn relative_motion(prev: &Pose, curr: &Pose) -> Pose {
    prev.inverse().compose(curr)
}

pub fn load_waypoints(path: &Path) -> Result<Vec<Vector2<f64>>, SimError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) => {
            let h = h?;
            if h.trim_end() != TRAJECTORY_HEADER {
                return Err(SimError::BadHeader { found: h });
            }
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&line, 2, idx + 2)?;
        points.push(Vector2::new(row[0], row[1]));
    }
    Ok(points)
}

pub fn save_waypoints(waypoints: &[Vector2<f64>], path: &Path) -> Result<(), SimError> {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for p in waypoints {
        let _ = writeln!(out, "{},{}", fmt(p.x), fmt(p.y));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> [Segment; 4] {
    let (a, b, c, d) = (
        Vector2::new(x0, y0),
        Vector2::new(x1, y0),
        Vector2::new(x1, y1),
        Vector2::new(x0, y1),
    );
    [
        Segment { a, b },
        Segment { a: b, b: c },
        Segment { a: c, b: d },
        Segment { a: d, b: a },
    ]
}

/// Built-in benchmark world: a rectangular loop corridor between an outer
/// wall and a central block, with two kiosks breaking the symmetry so every
/// stretch of corridor sees perpendicular structure.
pub fn demo_map() -> SegmentMap {
    let mut segments = Vec::new();
    segments.extend(rect(-60.0, -45.0, 60.0, 45.0));
    segments.extend(rect(-35.0, -20.0, 35.0, 20.0));
    segments.extend(rect(38.0, -42.0, 44.0, -38.0));
    segments.extend(rect(-52.0, 36.0, -44.0, 40.0));
    SegmentMap::new(segments).expect("demo map is well formed")
}

/// Loop down the middle of the demo corridor, closed back to its start.
pub fn demo_waypoints() -> Vec<Vector2<f64>> {
    vec![
        Vector2::new(-47.0, -32.0),
        Vector2::new(47.0, -32.0),
        Vector2::new(47.0, 32.0),
        Vector2::new(-47.0, 32.0),
        Vector2::new(-47.0, -32.0),
    ]
}
