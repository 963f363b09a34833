//! Point clouds, fixed-radius neighborhoods, and surface normal estimation.
//!
//! Scans come in two flavors: a [`SourceCloud`] is just points, a
//! [`SurfaceCloud`] additionally carries a unit normal and a validity flag
//! per point. Normals are the smallest-eigenvalue direction of the local
//! sample covariance over the fixed-radius neighborhood (query point
//! included), oriented toward the sensor origin. Points whose neighborhood
//! is too small (< 3 points) or degenerate (rank-0 covariance) are flagged
//! invalid instead of being dropped, so indices stay aligned with the raw
//! scan.

use nalgebra::Vector2;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

const SOURCE_HEADER: &str = "# bp-scanmatch cloud v1 source";
const SURFACE_HEADER: &str = "# bp-scanmatch cloud v1 surface";

/// Neighborhoods below this size give no usable covariance.
const MIN_NEIGHBORHOOD: usize = 3;

/// Covariance spectral floor below which the neighborhood counts as rank-0
/// (all points coincide to ~1e-10 m).
const RANK_EPS: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unrecognized header {found:?}")]
    BadHeader { found: String },
    #[error("expected a {expected} cloud, file holds {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("mismatched field lengths")]
    LengthMismatch,
    #[error("normal at index {0} is not unit length")]
    NotUnit(usize),
}

/// Raw scan: points only, in the sensor frame that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceCloud {
    points: Vec<Vector2<f64>>,
}

impl SourceCloud {
    pub fn new(points: Vec<Vector2<f64>>) -> Result<Self, CloudError> {
        if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(CloudError::NonFinite(i));
        }
        Ok(SourceCloud { points })
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, CloudError> {
        match load_any(path)? {
            Cloud::Source(c) => Ok(c),
            Cloud::Surface(_) => Err(CloudError::WrongKind {
                expected: "source",
                found: "surface",
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CloudError> {
        let mut out = String::new();
        out.push_str(SOURCE_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(out, "{},{}", fmt_f64(p.x), fmt_f64(p.y));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Scan with per-point unit normals and validity flags, same indexing as the
/// raw scan it was estimated from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfaceCloud {
    points: Vec<Vector2<f64>>,
    normals: Vec<Vector2<f64>>,
    valid: Vec<bool>,
}

impl SurfaceCloud {
    pub fn new(
        points: Vec<Vector2<f64>>,
        normals: Vec<Vector2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, CloudError> {
        if points.len() != normals.len() || points.len() != valid.len() {
            return Err(CloudError::LengthMismatch);
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(CloudError::NonFinite(i));
            }
        }
        for (i, (n, &v)) in normals.iter().zip(&valid).enumerate() {
            if !(n.x.is_finite() && n.y.is_finite()) {
                return Err(CloudError::NonFinite(i));
            }
            if v && (n.norm() - 1.0).abs() > 1e-9 {
                return Err(CloudError::NotUnit(i));
            }
        }
        Ok(SurfaceCloud {
            points,
            normals,
            valid,
        })
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    pub fn normals(&self) -> &[Vector2<f64>] {
        &self.normals
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid entries only, in index order.
    pub fn compact(&self) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let mut pts = Vec::with_capacity(self.valid_count());
        let mut nrm = Vec::with_capacity(pts.capacity());
        for i in 0..self.points.len() {
            if self.valid[i] {
                pts.push(self.points[i]);
                nrm.push(self.normals[i]);
            }
        }
        (pts, nrm)
    }

    pub fn load(path: &Path) -> Result<Self, CloudError> {
        match load_any(path)? {
            Cloud::Surface(c) => Ok(c),
            Cloud::Source(_) => Err(CloudError::WrongKind {
                expected: "surface",
                found: "source",
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CloudError> {
        let mut out = String::new();
        out.push_str(SURFACE_HEADER);
        out.push('\n');
        for i in 0..self.points.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(self.points[i].x),
                fmt_f64(self.points[i].y),
                fmt_f64(self.normals[i].x),
                fmt_f64(self.normals[i].y),
                u8::from(self.valid[i])
            );
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cloud {
    Source(SourceCloud),
    Surface(SurfaceCloud),
}

/// Loads either cloud kind, dispatching on the header. A zero-length file is
/// an empty source cloud; any other file must open with a known header.
pub fn load_any(path: &Path) -> Result<Cloud, CloudError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        None => return Ok(Cloud::Source(SourceCloud::default())),
        Some(h) => h?,
    };
    match header.trim_end() {
        SOURCE_HEADER => {
            let mut points = Vec::new();
            for (idx, line) in lines.enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row = parse_row(&line, 2, idx + 2)?;
                points.push(Vector2::new(row[0], row[1]));
            }
            Ok(Cloud::Source(SourceCloud { points }))
        }
        SURFACE_HEADER => {
            let (mut points, mut normals, mut valid) = (Vec::new(), Vec::new(), Vec::new());
            for (idx, line) in lines.enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let lineno = idx + 2;
                let mut fields = line.split(',');
                let mut next = |name: &str| {
                    fields.next().map(str::trim).ok_or(CloudError::Line {
                        line: lineno,
                        msg: format!("missing field {name}"),
                    })
                };
                let x = parse_f64(next("x")?, lineno)?;
                let y = parse_f64(next("y")?, lineno)?;
                let nx = parse_f64(next("nx")?, lineno)?;
                let ny = parse_f64(next("ny")?, lineno)?;
                let v = match next("valid")? {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(CloudError::Line {
                            line: lineno,
                            msg: format!("valid flag must be 0 or 1, got {other:?}"),
                        })
                    }
                };
                if fields.next().is_some() {
                    return Err(CloudError::Line {
                        line: lineno,
                        msg: "expected 5 fields".into(),
                    });
                }
                points.push(Vector2::new(x, y));
                normals.push(Vector2::new(nx, ny));
                valid.push(v);
            }
            SurfaceCloud::new(points, normals, valid).map(Cloud::Surface)
        }
        other => Err(CloudError::BadHeader {
            found: other.to_string(),
        }),
    }
}

/// 17 significant digits: lossless for binary64 and byte-stable across runs.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, line: usize) -> Result<f64, CloudError> {
    let v: f64 = field.parse().map_err(|_| CloudError::Line {
        line,
        msg: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(CloudError::Line {
            line,
            msg: format!("non-finite value: {field:?}"),
        });
    }
    Ok(v)
}

fn parse_row(line: &str, arity: usize, lineno: usize) -> Result<Vec<f64>, CloudError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != arity {
        return Err(CloudError::Line {
            line: lineno,
            msg: format!("expected {arity} fields, got {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| parse_f64(f.trim(), lineno))
        .collect()
}

/// Uniform binning with cell edge equal to the query radius: any ball of
/// that radius is covered by the 3x3 block of cells around its center, so
/// lookups are exact, not approximate.
struct UniformGrid {
    cell: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl UniformGrid {
    fn build(points: &[Vector2<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            bins.entry(Self::key(p, cell)).or_default().push(i);
        }
        UniformGrid { cell, bins }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices within `radius` of `center` (inclusive), sorted.
    fn within(&self, points: &[Vector2<f64>], center: &Vector2<f64>, radius: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(center, self.cell);
        let mut hits = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bin) = self.bins.get(&(cx + dx, cy + dy)) {
                    for &i in bin {
                        if (points[i] - center).norm() <= radius {
                            hits.push(i);
                        }
                    }
                }
            }
        }
        hits.sort_unstable();
        hits
    }
}

/// Indices of all points within `d_th` of point `query`, the query itself
/// included, in ascending order.
pub fn neighbors(points: &[Vector2<f64>], query: usize, d_th: f64) -> Vec<usize> {
    assert!(query < points.len(), "query index out of range");
    assert!(d_th > 0.0, "neighborhood radius must be positive");
    UniformGrid::build(points, d_th).within(points, &points[query], d_th)
}

/// Normal estimation with the sensor at the frame origin; scans are stored in
/// the frame of the sensor that took them, so this is the common case.
pub fn estimate_normals(points: &[Vector2<f64>], d_th: f64) -> SurfaceCloud {
    estimate_normals_from(points, d_th, &Vector2::zeros())
}

/// Per-point PCA normals over the `d_th` neighborhood, oriented toward
/// `sensor`. Points with fewer than 3 neighbors or a rank-0 covariance come
/// back flagged invalid with a zero normal.
pub fn estimate_normals_from(
    points: &[Vector2<f64>],
    d_th: f64,
    sensor: &Vector2<f64>,
) -> SurfaceCloud {
    assert!(d_th > 0.0, "neighborhood radius must be positive");
    let grid = UniformGrid::build(points, d_th);
    let rows: Vec<(Vector2<f64>, bool)> = points
        .par_iter()
        .map(|p| {
            let hood = grid.within(points, p, d_th);
            match normal_of(points, &hood, p, sensor) {
                Some(n) => (n, true),
                None => (Vector2::zeros(), false),
            }
        })
        .collect();
    let normals = rows.iter().map(|r| r.0).collect();
    let valid = rows.iter().map(|r| r.1).collect();
    SurfaceCloud {
        points: points.to_vec(),
        normals,
        valid,
    }
}

fn normal_of(
    points: &[Vector2<f64>],
    hood: &[usize],
    p: &Vector2<f64>,
    sensor: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let m = hood.len();
    if m < MIN_NEIGHBORHOOD {
        return None;
    }
    let mut centroid = Vector2::zeros();
    for &i in hood {
        centroid += points[i];
    }
    centroid /= m as f64;
    // Sample covariance about the neighborhood centroid; the 1/(m-1) scale is
    // irrelevant to the eigenvectors but kept for a well-defined spectrum.
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &i in hood {
        let d = points[i] - centroid;
        a += d.x * d.x;
        b += d.x * d.y;
        c += d.y * d.y;
    }
    let scale = 1.0 / (m as f64 - 1.0);
    let (a, b, c) = (a * scale, b * scale, c * scale);

    let (lmax, v) = minor_axis(a, b, c)?;
    if lmax <= RANK_EPS {
        return None;
    }
    // Orient toward the sensor; exact ties are broken to a fixed half-plane
    // so results never depend on evaluation order.
    let view = sensor - p;
    let dot = v.dot(&view);
    let flip = dot < 0.0 || (dot == 0.0 && (v.y < 0.0 || (v.y == 0.0 && v.x < 0.0)));
    Some(if flip { -v } else { v })
}

/// Closed-form eigensolve of the symmetric matrix [[a, b], [b, c]]: returns
/// the largest eigenvalue and the unit eigenvector of the smallest one.
fn minor_axis(a: f64, b: f64, c: f64) -> Option<(f64, Vector2<f64>)> {
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let lmin = half_tr - disc;
    let lmax = half_tr + disc;
    // Rows of (A - lmin I) both annihilate the eigenvector; take the better
    // conditioned of the two candidate solutions.
    let v1 = Vector2::new(b, lmin - a);
    let v2 = Vector2::new(lmin - c, b);
    let v = if v1.norm_squared() >= v2.norm_squared() {
        v1
    } else {
        v2
    };
    let n = v.norm();
    if n > 0.0 {
        Some((lmax, v / n))
    } else if a == c && b == 0.0 {
        // Isotropic spectrum: every direction is an eigenvector; fix one.
        Some((lmax, Vector2::new(1.0, 0.0)))
    } else {
        Some((lmax, if a <= c { Vector2::new(1.0, 0.0) } else { Vector2::new(0.0, 1.0) }))
    }
}
