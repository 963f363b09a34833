//! Reference matchers for the benchmark comparison: a 2D normal
//! distributions transform (NDT) scorer and a simplified
//! point-to-implicit-surface matcher in the IMLS family. Both climb their
//! own objective from a caller-supplied initial pose and share no machinery
//! with the probabilistic matcher, so benchmark comparisons stay
//! independent. The IMLS variant here skips the raycast-based point
//! selection of the full method; reports label it "IMLS-style".

use crate::cloud::{SourceCloud, SurfaceCloud};
use crate::se2::{wrap_angle, Pose, PoseChart};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use std::collections::HashMap;
use thiserror::Error;

/// Default NDT cell edge, matching the normal-estimation neighborhood
/// scale used elsewhere in the pipeline.
pub const NDT_CELL_SIZE: f64 = 2.0;

/// Cells with fewer points than this have no meaningful covariance and are
/// dropped from the grid.
const NDT_MIN_POINTS: usize = 3;

/// Covariance eigenvalues are floored at this fraction of cell-size
/// squared so near-collinear cells stay invertible.
const NDT_EIG_FLOOR: f64 = 1e-4;

const NDT_MAX_ITERS: usize = 100;
const NDT_STEP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum BaselineError {
    /// No source point scored against any populated cell (NDT) or carried
    /// any surface weight (IMLS) at the evaluation pose.
    #[error("source and destination clouds do not overlap")]
    NoOverlap,
}

/// Gaussian summary of the destination points that fell into one square
/// cell. `precision` is the inverse of `cov` after eigenvalue flooring.
#[derive(Debug, Clone)]
pub struct NdtCell {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub count: usize,
    precision: Matrix2<f64>,
}

/// Destination model for NDT matching: four copies of a square grid,
/// shifted by half a cell in x, y, and both, so every query point scores
/// against up to four overlapping Gaussians. The overlap smooths the
/// discontinuities a single grid would have at cell borders.
#[derive(Debug, Clone)]
pub struct NdtGrid {
    cell: f64,
    grids: [HashMap<(i64, i64), NdtCell>; 4],
}

impl NdtGrid {
    pub fn build(points: &[Vector2<f64>], cell: f64) -> Self {
        assert!(cell.is_finite() && cell > 0.0, "cell size must be positive");
        let grids = std::array::from_fn(|g| {
            let off = Self::offset(g, cell);
            let mut members: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
            for (idx, p) in points.iter().enumerate() {
                members.entry(Self::key(p, &off, cell)).or_default().push(idx);
            }
            members
                .into_iter()
                .filter(|(_, m)| m.len() >= NDT_MIN_POINTS)
                .map(|(k, m)| (k, Self::summarize(points, &m, cell)))
                .collect()
        });
        NdtGrid { cell, grids }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn cell_count(&self) -> usize {
        self.grids.iter().map(|g| g.len()).sum()
    }

    fn offset(grid: usize, cell: f64) -> Vector2<f64> {
        let half = cell / 2.0;
        Vector2::new((grid & 1) as f64 * half, ((grid >> 1) & 1) as f64 * half)
    }

    fn key(p: &Vector2<f64>, offset: &Vector2<f64>, cell: f64) -> (i64, i64) {
        (
            ((p.x - offset.x) / cell).floor() as i64,
            ((p.y - offset.y) / cell).floor() as i64,
        )
    }

    /// Two-pass mean/covariance so the centered moments keep full precision
    /// far from the origin; eigenvalues floored before inversion.
    fn summarize(points: &[Vector2<f64>], members: &[usize], cell: f64) -> NdtCell {
        let n = members.len() as f64;
        let mean = members.iter().map(|&i| points[i]).sum::<Vector2<f64>>() / n;
        let mut second = Matrix2::zeros();
        for &i in members {
            let d = points[i] - mean;
            second += d * d.transpose();
        }
        let raw = second / n;
        let eig = raw.symmetric_eigen();
        let floor = NDT_EIG_FLOOR * cell * cell;
        let mut cov = Matrix2::zeros();
        let mut precision = Matrix2::zeros();
        for k in 0..2 {
            let v = eig.eigenvectors.column(k);
            let lambda = eig.eigenvalues[k].max(floor);
            cov += lambda * v * v.transpose();
            precision += (1.0 / lambda) * v * v.transpose();
        }
        NdtCell {
            mean,
            cov,
            count: members.len(),
            precision,
        }
    }

    /// Sum of per-point Gaussian scores at `pose`; points and grids are
    /// visited in fixed order, so the sum is reproducible.
    pub fn score(&self, source: &[Vector2<f64>], pose: &Pose) -> f64 {
        self.score_terms(source, pose).0
    }

    /// Score plus its chart gradient and Hessian, and the number of source
    /// points that landed in at least one populated cell.
    fn score_terms(
        &self,
        source: &[Vector2<f64>],
        pose: &Pose,
    ) -> (f64, Vector3<f64>, Matrix3<f64>, usize) {
        let trans = *pose.trans();
        let mut score = 0.0;
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        let mut hits = 0;
        for s in source {
            let p = pose.transform(s);
            let rs = p - trans;
            // d(pose.transform(s))/dtheta is the rotated point turned 90 degrees.
            let jth = Vector2::new(-rs.y, rs.x);
            let mut hit = false;
            for (g, grid) in self.grids.iter().enumerate() {
                let off = Self::offset(g, self.cell);
                let Some(cell) = grid.get(&Self::key(&p, &off, self.cell)) else {
                    continue;
                };
                hit = true;
                let q = p - cell.mean;
                let u = cell.precision * q;
                let t = (-0.5 * q.dot(&u)).exp();
                let a = Vector3::new(u.x, u.y, jth.dot(&u));
                let lj = cell.precision * jth;
                let jt_l_j = Matrix3::new(
                    cell.precision[(0, 0)],
                    cell.precision[(0, 1)],
                    lj.x,
                    cell.precision[(1, 0)],
                    cell.precision[(1, 1)],
                    lj.y,
                    lj.x,
                    lj.y,
                    jth.dot(&lj),
                );
                score += t;
                grad -= t * a;
                hess += t * (a * a.transpose() - jt_l_j);
                // Second derivative of the transformed point: only the
                // theta-theta entry is nonzero and equals -(rotated point).
                hess[(2, 2)] += t * u.dot(&rs);
            }
            if hit {
                hits += 1;
            }
        }
        (score, grad, hess, hits)
    }

    /// Newton ascent with step halving from `initial`; every accepted step
    /// strictly improves the score, so the result never scores below the
    /// start. Errors when no source point overlaps the grid at `initial`.
    pub fn match_from(
        &self,
        source: &[Vector2<f64>],
        initial: &Pose,
    ) -> Result<Pose, BaselineError> {
        let mut chart = initial.chart();
        let (mut score, mut grad, mut hess, hits) =
            self.score_terms(source, &Pose::from_chart(&chart));
        if hits == 0 {
            return Err(BaselineError::NoOverlap);
        }
        for _ in 0..NDT_MAX_ITERS {
            // Newton direction for a maximum; fall back to unit steepest
            // ascent when the Hessian is singular or points downhill.
            let dir = (-hess)
                .lu()
                .solve(&grad)
                .filter(|d: &Vector3<f64>| d.dot(&grad) > 0.0)
                .unwrap_or_else(|| {
                    let n = grad.norm();
                    if n > 0.0 {
                        grad / n
                    } else {
                        Vector3::zeros()
                    }
                });
            // Converged when the Newton proposal itself is negligible; the
            // damped step length is a bad proxy because the line search can
            // accept a microscopic step at a cell-crossing ledge while the
            // optimum is still far.
            if dir.norm() < NDT_STEP_TOL {
                break;
            }
            let probe = |alpha: f64| {
                let candidate = PoseChart {
                    x: chart.x + alpha * dir.x,
                    y: chart.y + alpha * dir.y,
                    theta: wrap_angle(chart.theta + alpha * dir.z),
                };
                let terms = self.score_terms(source, &Pose::from_chart(&candidate));
                (candidate, terms)
            };
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let (candidate, terms) = probe(alpha);
                if terms.0 > score {
                    accepted = Some((candidate, terms));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((mut candidate, mut terms)) = accepted else {
                break;
            };
            // When the full step already ascends, the quadratic model was
            // too timid (stiff directions shorten it); extend while the
            // score keeps rising.
            if alpha == 1.0 {
                for _ in 0..6 {
                    let (far, far_terms) = probe(2.0 * alpha);
                    if far_terms.0 > terms.0 {
                        alpha *= 2.0;
                        candidate = far;
                        terms = far_terms;
                    } else {
                        break;
                    }
                }
            }
            chart = candidate;
            (score, grad, hess) = (terms.0, terms.1, terms.2);
        }
        Ok(Pose::from_chart(&chart))
    }
}

/// Local maximizer of the summed per-cell Gaussian score of the
/// transformed source against a grid built from the destination points.
pub fn ndt_match(
    source: &SourceCloud,
    destination_points: &[Vector2<f64>],
    initial: &Pose,
) -> Result<Pose, BaselineError> {
    NdtGrid::build(destination_points, NDT_CELL_SIZE).match_from(source.points(), initial)
}

/// Neighborhood scale of the implicit-surface weights.
#[derive(Debug, Clone, Copy)]
pub struct ImlsConfig {
    h: f64,
}

impl ImlsConfig {
    pub fn new(h: f64) -> Self {
        assert!(h.is_finite() && h > 0.0, "neighborhood parameter must be positive");
        ImlsConfig { h }
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

impl Default for ImlsConfig {
    fn default() -> Self {
        ImlsConfig { h: 2.0 }
    }
}

/// Weights below this are treated as no support; a query point whose total
/// weight underflows is skipped rather than divided by ~0.
const IMLS_W_FLOOR: f64 = 1e-12;

const IMLS_STEP_TOL: f64 = 1e-6;
const IMLS_MAX_ITERS: usize = 50;

/// Signed distance to the weighted-average local plane of the destination
/// surface at `x`, together with its spatial gradient:
/// `I(x) = sum_i w_i n_i.(x - d_i) / sum_i w_i` with Gaussian weights
/// `w_i = exp(-|x - d_i|^2 / h^2)`. `None` when every weight underflows.
pub fn implicit_surface_distance(
    x: &Vector2<f64>,
    points: &[Vector2<f64>],
    normals: &[Vector2<f64>],
    h: f64,
) -> Option<(f64, Vector2<f64>)> {
    let inv_h2 = 1.0 / (h * h);
    let mut w_sum = 0.0;
    let mut a_sum = 0.0;
    let mut w_grad = Vector2::zeros();
    let mut a_grad = Vector2::zeros();
    for (d, n) in points.iter().zip(normals) {
        let r = x - d;
        let w = (-r.norm_squared() * inv_h2).exp();
        let plane = n.dot(&r);
        let dw = -2.0 * inv_h2 * w * r;
        w_sum += w;
        a_sum += w * plane;
        w_grad += dw;
        a_grad += plane * dw + w * n;
    }
    if w_sum < IMLS_W_FLOOR {
        return None;
    }
    let value = a_sum / w_sum;
    Some((value, (a_grad - value * w_grad) / w_sum))
}

/// Gauss-Newton minimizer of the summed squared implicit-surface distance
/// of the transformed source points. Source points with no surface support
/// are skipped; if none survive the match fails with `NoOverlap`. Stops
/// when the chart step drops below 1e-6 or after 50 iterations; a
/// rank-deficient normal system (under-constrained geometry) also stops
/// the iteration where it stands.
pub fn imls_match(
    source: &SourceCloud,
    destination_surface: &SurfaceCloud,
    config: &ImlsConfig,
    initial: &Pose,
) -> Result<Pose, BaselineError> {
    let (points, normals) = destination_surface.compact();
    let mut chart = initial.chart();
    for _ in 0..IMLS_MAX_ITERS {
        let pose = Pose::from_chart(&chart);
        let trans = *pose.trans();
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut used = 0;
        for s in source.points() {
            let p = pose.transform(s);
            let Some((value, grad)) = implicit_surface_distance(&p, &points, &normals, config.h)
            else {
                continue;
            };
            let rs = p - trans;
            let jth = Vector2::new(-rs.y, rs.x);
            let j = Vector3::new(grad.x, grad.y, grad.dot(&jth));
            jtj += j * j.transpose();
            jtr += value * j;
            used += 1;
        }
        if used == 0 {
            return Err(BaselineError::NoOverlap);
        }
        let Some(delta) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        chart = PoseChart {
            x: chart.x + delta.x,
            y: chart.y + delta.y,
            theta: wrap_angle(chart.theta + delta.z),
        };
        if delta.norm() < IMLS_STEP_TOL {
            break;
        }
    }
    Ok(Pose::from_chart(&chart))
}
