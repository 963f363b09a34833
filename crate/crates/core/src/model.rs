//! Probabilistic measurement model for point-to-plane scan matching.
//!
//! Three independent pieces, kept separate so each can be swapped or tested
//! alone:
//!
//! * [`ErrorModel`]: zero-mean Gaussian density of the point-to-plane
//!   residual `n . (d - dP s)` for an associated pair.
//! * [`AssociabilityModel`]: prior probability `f_a` that a destination
//!   point has an associable counterpart in the source scan at all.
//! * [`ClutterModel`]: Cartesian density of a clutter point drawn uniformly
//!   in range and bearing over the sensor disc, `1 / (2 pi R r)`. The `1/r`
//!   comes from the polar-to-Cartesian Jacobian and makes the density
//!   integrate to one over the disc.
//!
//! On top of these sit the per-pair association weights (`q` factors), the
//! clutter product over a source scan, and the exact joint density of
//! (measurements, association) given a pose. The exact joint is the
//! enumeration oracle the sampled pipeline is tested against; it is written
//! directly from the closed form and shares no code with the belief
//! propagation path.
//!
//! All densities are computed in log space; linear wrappers exponentiate.

use crate::se2::Pose;
use nalgebra::Vector2;
use std::f64::consts::TAU;

/// Gaussian point-to-plane error density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    sigma_e: f64,
    log_norm: f64,
}

impl ErrorModel {
    pub fn new(sigma_e: f64) -> Self {
        assert!(sigma_e > 0.0 && sigma_e.is_finite(), "sigma_e must be positive");
        ErrorModel {
            sigma_e,
            log_norm: -(sigma_e.ln() + 0.5 * TAU.ln()),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_e
    }

    pub fn log_density(&self, e: f64) -> f64 {
        let z = e / self.sigma_e;
        self.log_norm - 0.5 * z * z
    }

    pub fn density(&self, e: f64) -> f64 {
        self.log_density(e).exp()
    }
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel::new(0.03)
    }
}

/// Probability that a destination point is associable to any source point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociabilityModel {
    f_a: f64,
}

impl AssociabilityModel {
    /// `f_a` must lie in `[0, 1)`: the miss probability `1 - f_a` appears as
    /// a standalone factor and must stay positive.
    pub fn new(f_a: f64) -> Self {
        assert!((0.0..1.0).contains(&f_a), "f_a must lie in [0, 1)");
        AssociabilityModel { f_a }
    }

    pub fn f_a(&self) -> f64 {
        self.f_a
    }

    pub fn log_assoc(&self) -> f64 {
        self.f_a.ln()
    }

    pub fn log_miss(&self) -> f64 {
        (1.0 - self.f_a).ln()
    }
}

impl Default for AssociabilityModel {
    fn default() -> Self {
        AssociabilityModel::new(0.8)
    }
}

/// Uniform polar clutter over the sensor disc, as a Cartesian density. The
/// support is `0 < |s| <= max_range`; the density does not depend on the
/// pose because clutter lives in the source sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterModel {
    lambda_na: f64,
    max_range: f64,
    log_norm: f64,
}

impl ClutterModel {
    pub fn new(lambda_na: f64, max_range: f64) -> Self {
        assert!(lambda_na > 0.0 && lambda_na.is_finite(), "lambda_na must be positive");
        assert!(max_range > 0.0 && max_range.is_finite(), "max_range must be positive");
        ClutterModel {
            lambda_na,
            max_range,
            log_norm: -(TAU * max_range).ln(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_na
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    pub fn in_support(&self, s: &Vector2<f64>) -> bool {
        let r = s.norm();
        r > 0.0 && r <= self.max_range
    }

    /// `-inf` outside the support (the support-violation signal in log space).
    pub fn log_density(&self, s: &Vector2<f64>) -> f64 {
        if self.in_support(s) {
            self.log_norm - s.norm().ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn density(&self, s: &Vector2<f64>) -> f64 {
        self.log_density(s).exp()
    }
}

impl Default for ClutterModel {
    fn default() -> Self {
        ClutterModel::new(1.0, 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModels {
    pub error: ErrorModel,
    pub assoc: AssociabilityModel,
    pub clutter: ClutterModel,
}

impl Default for MeasurementModels {
    fn default() -> Self {
        MeasurementModels {
            error: ErrorModel::default(),
            assoc: AssociabilityModel::default(),
            clutter: ClutterModel::default(),
        }
    }
}

/// Point-to-plane residual `n . (d - dP s)`: signed distance of the
/// transformed source point from the plane through the destination point.
/// Offsets of either point tangential to the normal do not move it.
pub fn residual(
    delta_p: &Pose,
    source: &Vector2<f64>,
    dest: &Vector2<f64>,
    normal: &Vector2<f64>,
) -> f64 {
    normal.dot(&(dest - delta_p.transform(source)))
}

impl MeasurementModels {
    /// Log association weight of pairing a destination point with source
    /// point `source` under pose `delta_p`: the pair likelihood over the
    /// clutter alternative, `f_a f(e) / (lambda f_na(s))`.
    pub fn log_q_assoc(
        &self,
        delta_p: &Pose,
        source: &Vector2<f64>,
        dest: &Vector2<f64>,
        normal: &Vector2<f64>,
    ) -> f64 {
        let log_fna = self.clutter.log_density(source);
        assert!(
            log_fna > f64::NEG_INFINITY,
            "source point outside clutter support"
        );
        self.log_q_assoc_parts(residual(delta_p, source, dest, normal), log_fna)
    }

    /// Hot-path variant with the residual and `log f_na(s)` precomputed.
    #[inline]
    pub fn log_q_assoc_parts(&self, residual: f64, log_fna: f64) -> f64 {
        self.assoc.log_assoc() + self.error.log_density(residual)
            - self.clutter.lambda().ln()
            - log_fna
    }

    /// `log_q_assoc_parts` with the residual scored under a substitute
    /// error scale, for smoothed stand-ins of the posterior.
    #[inline]
    pub fn log_q_assoc_parts_at(&self, residual: f64, log_fna: f64, error: &ErrorModel) -> f64 {
        self.assoc.log_assoc() + error.log_density(residual)
            - self.clutter.lambda().ln()
            - log_fna
    }

    /// Log weight of leaving a destination point unassociated.
    #[inline]
    pub fn log_q_miss(&self) -> f64 {
        self.assoc.log_miss()
    }

    pub fn q_assoc(
        &self,
        delta_p: &Pose,
        source: &Vector2<f64>,
        dest: &Vector2<f64>,
        normal: &Vector2<f64>,
    ) -> f64 {
        self.log_q_assoc(delta_p, source, dest, normal).exp()
    }

    pub fn q_miss(&self) -> f64 {
        self.log_q_miss().exp()
    }
}

/// Log clutter product over a source scan, `sum_j log f_na(s_j)`. The model
/// is pose-independent; `_delta_p` documents the general contract (a clutter
/// model conditioned on the pose would be evaluated here).
pub fn log_clutter_product(
    clutter: &ClutterModel,
    _delta_p: &Pose,
    sources: &[Vector2<f64>],
) -> f64 {
    sources.iter().map(|s| clutter.log_density(s)).sum()
}

pub fn clutter_product(clutter: &ClutterModel, delta_p: &Pose, sources: &[Vector2<f64>]) -> f64 {
    log_clutter_product(clutter, delta_p, sources).exp()
}

fn has_duplicate_nonzero(assoc: &[usize]) -> bool {
    // Sized by the largest claimed source id: ids can exceed the
    // destination count when sources outnumber destinations.
    let cap = assoc.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; cap + 1];
    for &a in assoc {
        if a == 0 {
            continue;
        }
        if seen[a] {
            return true;
        }
        seen[a] = true;
    }
    false
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact log joint density of (source scan, association, source count) given
/// the pose, marginalized over nothing: the enumeration oracle.
///
/// `assoc[i]` pairs destination `i` with source `assoc[i] - 1`, or leaves it
/// unassociated when 0. Associations reusing a source point are invalid and
/// get density zero. Written straight from the closed form:
/// `psi(a) * lambda^(N_S - |D_a|) / N_S! * exp(-lambda) * prod_j f_na(s_j)
///  * prod_assoc [f_a f(e_i) / f_na(s_a_i)] * prod_miss (1 - f_a)`.
pub fn log_joint_density_exact(
    models: &MeasurementModels,
    delta_p: &Pose,
    assoc: &[usize],
    sources: &[Vector2<f64>],
    dest_points: &[Vector2<f64>],
    dest_normals: &[Vector2<f64>],
) -> f64 {
    let n_s = sources.len();
    assert_eq!(dest_points.len(), dest_normals.len());
    assert_eq!(assoc.len(), dest_points.len());
    assert!(
        assoc.iter().all(|&a| a <= n_s),
        "association index out of range"
    );
    if has_duplicate_nonzero(assoc) {
        return f64::NEG_INFINITY;
    }
    let lambda = models.clutter.lambda();
    let n_assoc = assoc.iter().filter(|&&a| a > 0).count();
    let mut log = (n_s - n_assoc) as f64 * lambda.ln() - ln_factorial(n_s) - lambda;
    log += log_clutter_product(&models.clutter, delta_p, sources);
    for (i, &a) in assoc.iter().enumerate() {
        if a == 0 {
            log += models.assoc.log_miss();
        } else {
            let s = &sources[a - 1];
            let e = residual(delta_p, s, &dest_points[i], &dest_normals[i]);
            log += models.assoc.log_assoc() + models.error.log_density(e)
                - models.clutter.log_density(s);
        }
    }
    log
}

pub fn joint_density_exact(
    models: &MeasurementModels,
    delta_p: &Pose,
    assoc: &[usize],
    sources: &[Vector2<f64>],
    dest_points: &[Vector2<f64>],
    dest_normals: &[Vector2<f64>],
) -> f64 {
    log_joint_density_exact(models, delta_p, assoc, sources, dest_points, dest_normals).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn error_density_peak_and_tails() {
        let m = ErrorModel::new(0.03);
        let peak = m.density(0.0);
        assert_relative_eq!(peak, 1.0 / (0.03 * TAU.sqrt()), max_relative = 1e-12);
        assert_abs_diff_eq!(peak, 13.298, epsilon = 1e-3);
        assert_relative_eq!(m.density(0.03) / peak, (-0.5f64).exp(), max_relative = 1e-12);
        assert!(m.density(0.3) < 1e-20 * peak);
    }

    #[test]
    fn clutter_density_value_and_support() {
        let c = ClutterModel::new(1.0, 100.0);
        let s = Vector2::new(30.0, 40.0); // r = 50
        assert_relative_eq!(
            c.density(&s),
            1.0 / (TAU * 100.0 * 50.0),
            max_relative = 1e-12
        );
        assert!(!c.in_support(&Vector2::zeros()));
        assert_eq!(c.density(&Vector2::zeros()), 0.0);
        assert!(!c.in_support(&Vector2::new(101.0, 0.0)));
        assert_eq!(c.log_density(&Vector2::new(101.0, 0.0)), f64::NEG_INFINITY);
        assert!(c.in_support(&Vector2::new(100.0, 0.0)));
    }

    #[test]
    fn clutter_density_integrates_to_one() {
        // Midpoint quadrature in polar cells; evaluates the actual Cartesian
        // density so a missing 1/r Jacobian would blow the integral up to R/2.
        let c = ClutterModel::new(1.0, 100.0);
        let (nr, nt) = (400, 400);
        let dr = c.max_range() / nr as f64;
        let dt = TAU / nt as f64;
        let mut integral = 0.0;
        for i in 0..nr {
            let r = (i as f64 + 0.5) * dr;
            for j in 0..nt {
                let t = (j as f64 + 0.5) * dt;
                let p = Vector2::new(r * t.cos(), r * t.sin());
                integral += c.density(&p) * r * dr * dt;
            }
        }
        assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn q_factor_examples() {
        let models = MeasurementModels::default();
        assert_relative_eq!(models.q_miss(), 0.2, max_relative = 1e-12);

        // Zero residual: the weight is the composition of the two densities.
        let s = Vector2::new(5.0, 0.0);
        let d = Vector2::new(5.0, 0.0);
        let n = Vector2::new(1.0, 0.0);
        let expect = 0.8 * models.error.density(0.0)
            / (models.clutter.lambda() * models.clutter.density(&s));
        assert_relative_eq!(
            models.q_assoc(&Pose::identity(), &s, &d, &n),
            expect,
            max_relative = 1e-12
        );

        // f_a = 0 turns association off entirely.
        let off = MeasurementModels {
            assoc: AssociabilityModel::new(0.0),
            ..models
        };
        assert_eq!(off.q_assoc(&Pose::identity(), &s, &d, &n), 0.0);
        assert_eq!(off.q_miss(), 1.0);
    }

    #[test]
    fn clutter_product_basics() {
        let c = ClutterModel::default();
        let id = Pose::identity();
        assert_eq!(log_clutter_product(&c, &id, &[]), 0.0);
        let s = Vector2::new(3.0, 4.0);
        assert_relative_eq!(
            clutter_product(&c, &id, &[s]),
            c.density(&s),
            max_relative = 1e-12
        );
        // Pose independence: same value under any pose argument.
        let other = Pose::from_xytheta(2.0, -7.0, 1.2);
        assert_eq!(
            log_clutter_product(&c, &id, &[s, s * 2.0]),
            log_clutter_product(&c, &other, &[s, s * 2.0])
        );
    }

    /// The instance behind all frozen constants below: sigma_e = 1,
    /// f_a = 0.5, lambda = 1, R = 10, dest (1,0)/(0,2) with axis normals,
    /// sources (1,0)/(0,1), identity pose.
    fn golden_instance() -> (
        MeasurementModels,
        Vec<Vector2<f64>>,
        Vec<Vector2<f64>>,
        Vec<Vector2<f64>>,
    ) {
        let models = MeasurementModels {
            error: ErrorModel::new(1.0),
            assoc: AssociabilityModel::new(0.5),
            clutter: ClutterModel::new(1.0, 10.0),
        };
        let sources = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        let dest_points = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 2.0)];
        let dest_normals = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        (models, sources, dest_points, dest_normals)
    }

    #[test]
    fn joint_density_golden_values() {
        let (models, src, dp, dn) = golden_instance();
        let id = Pose::identity();
        // Frozen from a 30-digit evaluation of the closed form.
        let cases: [(&[usize], f64); 4] = [
            (&[1, 2], 4.4390334925636052e-3),
            (&[1, 0], 2.9197504131789471e-4),
            (&[0, 0], 1.1648118880366344e-5),
            (&[2, 1], 6.0075785501290558e-4),
        ];
        for (assoc, expect) in cases {
            assert_relative_eq!(
                joint_density_exact(&models, &id, assoc, &src, &dp, &dn),
                expect,
                max_relative = 1e-12
            );
        }
        assert_eq!(
            joint_density_exact(&models, &id, &[1, 1], &src, &dp, &dn),
            0.0
        );
    }

    #[test]
    fn joint_density_total_mass() {
        let (models, src, dp, dn) = golden_instance();
        let id = Pose::identity();
        let mut total = 0.0;
        for a0 in 0..=2 {
            for a1 in 0..=2 {
                total += joint_density_exact(&models, &id, &[a0, a1], &src, &dp, &dn);
            }
        }
        assert!(total.is_finite() && total > 0.0);
        assert_relative_eq!(total, 5.737112661549883e-3, max_relative = 1e-12);
    }

    #[test]
    fn joint_density_no_source_no_association() {
        let models = MeasurementModels::default();
        let dp = vec![Vector2::new(1.0, 0.0); 3];
        let dn = vec![Vector2::new(1.0, 0.0); 3];
        let v = joint_density_exact(&models, &Pose::identity(), &[0, 0, 0], &[], &dp, &dn);
        let expect = (-models.clutter.lambda()).exp() * 0.2f64.powi(3);
        assert_relative_eq!(v, expect, max_relative = 1e-12);
    }

    #[test]
    fn joint_density_handles_more_sources_than_destinations() {
        // Source ids above the destination count are legal associations.
        let (models, mut src, dp, dn) = golden_instance();
        src.push(Vector2::new(3.0, 4.0));
        let v = joint_density_exact(&models, &Pose::identity(), &[3, 0], &src, &dp, &dn);
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(
            joint_density_exact(&models, &Pose::identity(), &[3, 3], &src, &dp, &dn),
            0.0
        );
    }

    #[test]
    fn joint_density_clutter_extension_ratio() {
        // Appending one unassociated source point multiplies the joint by
        // lambda * f_na(s_new) / (N_S + 1): the Poisson factor for one more
        // clutter point combined with the 1/N_S! ordering factor.
        let (models, mut src, dp, dn) = golden_instance();
        let id = Pose::identity();
        let base = log_joint_density_exact(&models, &id, &[1, 0], &src, &dp, &dn);
        let extra = Vector2::new(3.0, 4.0);
        src.push(extra);
        let grown = log_joint_density_exact(&models, &id, &[1, 0], &src, &dp, &dn);
        let expect_ratio =
            models.clutter.lambda().ln() + models.clutter.log_density(&extra) - 3.0f64.ln();
        assert_relative_eq!(grown - base, expect_ratio, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn residual_ignores_tangential_offsets(
            dx in -5.0f64..5.0, dy in -5.0f64..5.0, t in -3.0f64..3.0,
            shift in -10.0f64..10.0,
        ) {
            let pose = Pose::from_xytheta(dx, dy, t);
            let n = Vector2::new(t.cos(), t.sin());
            let tangent = Vector2::new(-n.y, n.x);
            let s = Vector2::new(1.0, 2.0);
            let d = Vector2::new(0.5, -1.0);
            let base = residual(&pose, &s, &d, &n);
            let moved = residual(&pose, &s, &(d + tangent * shift), &n);
            prop_assert!((base - moved).abs() < 1e-10 * (1.0 + base.abs() + shift.abs()));
        }

        #[test]
        fn q_weights_positive_and_monotone(offset in 0.0f64..0.2, extra in 1e-3f64..0.2) {
            let models = MeasurementModels::default();
            let s = Vector2::new(5.0, 0.0);
            let n = Vector2::new(1.0, 0.0);
            let near = models.log_q_assoc(
                &Pose::identity(), &s, &Vector2::new(5.0 + offset, 0.0), &n);
            let far = models.log_q_assoc(
                &Pose::identity(), &s, &Vector2::new(5.0 + offset + extra, 0.0), &n);
            prop_assert!(near.is_finite());
            prop_assert!(far < near);
            prop_assert!(models.q_miss() > 0.0);
        }
    }
}
