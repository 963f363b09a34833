//! Rigid transforms in the plane and the pose error metrics used by the
//! benchmark.
//!
//! A [`Pose`] is stored as an explicit 2x2 rotation matrix plus a translation
//! vector rather than as an angle, so composition is a plain matrix product
//! and the group operations stay branch-free. Long composition chains are
//! periodically snapped back to the nearest rotation (polar decomposition);
//! see [`Pose::compose`].

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Spatial dimension. Everything in this crate is planar; the constant marks
/// the places where a dimension-generic formula has been specialized.
pub const DIM: usize = 2;

/// Compositions tolerated before the rotation is re-orthonormalized. Each
/// product adds a few ulp of drift, so renormalizing every 64 operations keeps
/// chains of 1e4 compositions well inside a 1e-9 orthonormality budget.
const RENORM_CHAIN: u32 = 64;

/// Wraps an angle into the canonical interval `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Rigid transform of the plane: `p -> R p + t`.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    rot: Matrix2<f64>,
    trans: Vector2<f64>,
    chain: u32,
}

/// Chart coordinates `(x, y, theta)` of a pose, `theta` in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseChart {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot: Matrix2::identity(),
            trans: Vector2::zeros(),
            chain: 0,
        }
    }

    pub fn from_xytheta(x: f64, y: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Pose {
            rot: Matrix2::new(c, -s, s, c),
            trans: Vector2::new(x, y),
            chain: 0,
        }
    }

    pub fn from_chart(chart: &PoseChart) -> Self {
        Self::from_xytheta(chart.x, chart.y, chart.theta)
    }

    pub fn rotation(theta: f64) -> Self {
        Self::from_xytheta(0.0, 0.0, theta)
    }

    pub fn translation(x: f64, y: f64) -> Self {
        Pose {
            rot: Matrix2::identity(),
            trans: Vector2::new(x, y),
            chain: 0,
        }
    }

    /// Builds a pose from parts. The rotation must already be orthonormal
    /// with determinant +1; violations are a caller bug.
    pub fn from_parts(rot: Matrix2<f64>, trans: Vector2<f64>) -> Self {
        let defect = (rot.transpose() * rot - Matrix2::identity()).norm();
        assert!(
            defect < 1e-6 && (rot.determinant() - 1.0).abs() < 1e-6,
            "rotation part is not orthonormal"
        );
        Pose {
            rot,
            trans,
            chain: 0,
        }
    }

    pub fn rot(&self) -> &Matrix2<f64> {
        &self.rot
    }

    pub fn trans(&self) -> &Vector2<f64> {
        &self.trans
    }

    /// Heading angle in `(-pi, pi]`, read off the first rotation column.
    pub fn theta(&self) -> f64 {
        let t = self.rot[(1, 0)].atan2(self.rot[(0, 0)]);
        if t == -PI {
            PI
        } else {
            t
        }
    }

    pub fn chart(&self) -> PoseChart {
        PoseChart {
            x: self.trans.x,
            y: self.trans.y,
            theta: self.theta(),
        }
    }

    /// Homogeneous 3x3 matrix `[R t; 0 1]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let mut m = Matrix3::identity();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<2, 1>(0, 2).copy_from(&self.trans);
        m
    }

    /// Group product `self * other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
            chain: self.chain + other.chain + 1,
        };
        if out.chain > RENORM_CHAIN {
            out.rot = nearest_rotation(&out.rot);
            out.chain = 0;
        }
        out
    }

    /// Group inverse. The transpose of an orthonormal matrix is exact, so the
    /// chain counter carries over unchanged.
    pub fn inverse(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose {
            rot: rt,
            trans: -(rt * self.trans),
            chain: self.chain,
        }
    }

    /// Applies the transform to a point (rotates and translates).
    pub fn transform(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rot * p + self.trans
    }

    /// Rotates a direction; translation does not apply.
    pub fn rotate(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.rot * v
    }

    /// Homogeneous action: points move, directions only rotate.
    pub fn transform_point(&self, p: &HomogeneousPoint) -> HomogeneousPoint {
        HomogeneousPoint(self.matrix() * p.0)
    }
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rot == other.rot && self.trans == other.trans
    }
}

/// Group-relative pose `dest * source^-1`: the unique transform with
/// `compose(result, source) = dest`.
pub fn relative_pose(source: &Pose, dest: &Pose) -> Pose {
    dest.compose(&source.inverse())
}

/// Nearest rotation in the Frobenius sense (closed-form 2x2 polar
/// decomposition): the angle maximizing `tr(R^T M)`.
fn nearest_rotation(m: &Matrix2<f64>) -> Matrix2<f64> {
    let theta = (m[(1, 0)] - m[(0, 1)]).atan2(m[(0, 0)] + m[(1, 1)]);
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Point or direction in homogeneous coordinates; the last entry is 1 for
/// points and 0 for directions, and transforms preserve it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint(Vector3<f64>);

impl HomogeneousPoint {
    pub fn point(x: f64, y: f64) -> Self {
        HomogeneousPoint(Vector3::new(x, y, 1.0))
    }

    pub fn direction(x: f64, y: f64) -> Self {
        HomogeneousPoint(Vector3::new(x, y, 0.0))
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        assert!(v.z == 0.0 || v.z == 1.0, "homogeneous flag must be 0 or 1");
        HomogeneousPoint(v)
    }

    pub fn xy(&self) -> Vector2<f64> {
        Vector2::new(self.0.x, self.0.y)
    }

    pub fn is_point(&self) -> bool {
        self.0.z == 1.0
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    /// Both benchmark error metrics normalize by the ground-truth translation
    /// norm, so stationary frames have no defined value; callers exclude them.
    #[error("pose error metrics are undefined for zero ground-truth translation")]
    ZeroTranslation,
}

/// Relative translation error `|t_est - t_true| / |t_true|` between two
/// relative-pose estimates.
pub fn translation_error(est: &Pose, truth: &Pose) -> Result<f64, MetricError> {
    let denom = truth.trans.norm();
    if denom == 0.0 {
        return Err(MetricError::ZeroTranslation);
    }
    Ok((est.trans - truth.trans).norm() / denom)
}

/// Relative rotation error in radians per meter of ground-truth translation.
///
/// The relative rotation is embedded as a 3x3 rotation (unit third diagonal
/// entry) and the angle recovered from its trace, `acos((tr - 1) / 2)`; in
/// the plane the trace is `2 cos(theta) + 1` so this is exactly `|theta|`.
pub fn rotation_error(est: &Pose, truth: &Pose) -> Result<f64, MetricError> {
    let denom = truth.trans.norm();
    if denom == 0.0 {
        return Err(MetricError::ZeroTranslation);
    }
    let rel = est.rot.transpose() * truth.rot;
    let trace3 = rel.trace() + 1.0;
    let angle = ((trace3 - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    Ok(angle / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-50.0f64..50.0, -50.0f64..50.0, -PI..PI)
            .prop_map(|(x, y, t)| Pose::from_xytheta(x, y, t))
    }

    #[test]
    fn compose_rotation_after_translation() {
        // Hand oracle: translate (1,0) then rotate 90 degrees about the
        // origin takes the origin to (0,1).
        let p = Pose::rotation(PI / 2.0).compose(&Pose::translation(1.0, 0.0));
        let moved = p.transform(&Vector2::new(0.0, 0.0));
        assert_abs_diff_eq!(moved.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(moved.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_pose_from_identity_is_dest() {
        let dest = Pose::from_xytheta(3.0, -2.0, 0.7);
        let rel = relative_pose(&Pose::identity(), &dest);
        assert_abs_diff_eq!((rel.matrix() - dest.matrix()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_point_vs_direction() {
        let p = Pose::from_xytheta(1.0, 2.0, PI / 2.0);
        let pt = p.transform_point(&HomogeneousPoint::point(1.0, 0.0));
        assert!(pt.is_point());
        assert_abs_diff_eq!(pt.xy().x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pt.xy().y, 3.0, epsilon = 1e-12);

        let dir = p.transform_point(&HomogeneousPoint::direction(1.0, 0.0));
        assert!(!dir.is_point());
        assert_abs_diff_eq!(dir.xy().x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dir.xy().y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn translation_error_examples() {
        let truth = Pose::translation(1.0, 0.0);
        let est = Pose::translation(1.1, 0.0);
        assert_relative_eq!(
            translation_error(&est, &truth).unwrap(),
            0.1,
            max_relative = 1e-12
        );
        assert_eq!(
            translation_error(&est, &Pose::rotation(0.3)),
            Err(MetricError::ZeroTranslation)
        );
    }

    #[test]
    fn rotation_error_examples() {
        let truth = Pose::from_xytheta(1.0, 0.0, PI / 2.0);
        let est = Pose::translation(1.0, 0.0);
        assert_relative_eq!(
            rotation_error(&est, &truth).unwrap(),
            PI / 2.0,
            max_relative = 1e-9
        );

        // -30 degrees over 2 m of motion: pi/12 rad per meter.
        let truth = Pose::from_xytheta(0.0, 2.0, -PI / 6.0);
        let est = Pose::from_xytheta(0.0, 2.0, 0.0);
        assert_relative_eq!(
            rotation_error(&est, &truth).unwrap(),
            PI / 12.0,
            max_relative = 1e-9
        );
    }

    #[test]
    fn long_chains_stay_orthonormal() {
        let step = Pose::from_xytheta(0.01, -0.02, 0.1);
        let mut acc = Pose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        let defect = (acc.rot().transpose() * acc.rot() - Matrix2::identity()).norm();
        assert!(defect < 1e-9, "orthonormality defect {defect:e}");
        assert!((acc.rot().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_boundary() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-7.0 * PI), PI, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let ab_c = a.compose(&b).compose(&c);
            let a_bc = a.compose(&b.compose(&c));
            prop_assert!((ab_c.matrix() - a_bc.matrix()).norm() < 1e-9);

            let id = Pose::identity();
            prop_assert!((a.compose(&id).matrix() - a.matrix()).norm() < 1e-12);
            prop_assert!((id.compose(&a).matrix() - a.matrix()).norm() < 1e-12);

            let inv = a.compose(&a.inverse());
            prop_assert!((inv.matrix() - id.matrix()).norm() < 1e-9);
        }

        #[test]
        fn relative_pose_round_trip(a in arb_pose(), b in arb_pose()) {
            let rel = relative_pose(&a, &b);
            prop_assert!((rel.compose(&a).matrix() - b.matrix()).norm() < 1e-9);
        }

        #[test]
        fn chart_round_trip(x in -100.0f64..100.0, y in -100.0f64..100.0, t in -3.141f64..3.141) {
            let chart = Pose::from_xytheta(x, y, t).chart();
            prop_assert!((chart.x - x).abs() < 1e-12);
            prop_assert!((chart.y - y).abs() < 1e-12);
            prop_assert!((chart.theta - t).abs() < 1e-12);
        }

        #[test]
        fn theta_always_canonical(t in -50.0f64..50.0) {
            let theta = Pose::rotation(t).theta();
            prop_assert!(theta > -PI && theta <= PI);
            prop_assert!((wrap_angle(t) - theta).abs() < 1e-9);
        }
    }
}
