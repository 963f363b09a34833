//! Enumeration-backed cross-checks of the fast inference paths, runnable
//! outside the test harness (the CLI exposes them as `oracle-check`).
//!
//! Each check pits a production path against an oracle built from first
//! principles on the spot: exhaustive association sums, brute-force
//! marginals, sorted scans, hand arithmetic. The parameterized functions
//! return the worst observed deviation so callers can scale the instance
//! counts up (the heavy test suites) or down (an interactive command).

use nalgebra::Vector2;
use rand::RngExt;

use crate::bp::{brute_force_marginals, run_bp, BeliefTable, BpConfig, BpError};
use crate::harness::{compute_quantile, HarnessError};
use crate::inference::{
    compute_q_messages, draw_samples, MatchError, MatchInstance, PosePrior, PosteriorSurface,
};
use crate::model::{
    log_joint_density_exact, AssociabilityModel, ClutterModel, ErrorModel, MeasurementModels,
};
use crate::rng::{stream, Domain};
use crate::se2::Pose;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const LOOPY_TOL: f64 = 0.05;
const TREE_TOL: f64 = 1e-9;
const GRID_TOL: f64 = 0.07;
const HAND_TOL: f64 = 1e-4;

/// Runs every check at interactive sizes (a few seconds end to end) and
/// reports one pass/fail line each. Deterministic in the seed.
pub fn run_checks(seed: u64) -> Vec<CheckReport> {
    let mut out = Vec::new();

    out.push(match loopy_marginals_deviation(seed, 40, 3) {
        Ok(dev) => CheckReport {
            name: "loopy-marginals-vs-enumeration",
            passed: dev <= LOOPY_TOL,
            detail: format!("max row-peak-relative deviation {dev:.3e} over 40 peaked tables (tolerance {LOOPY_TOL})"),
        },
        Err(e) => failed("loopy-marginals-vs-enumeration", e),
    });

    out.push(match tree_marginals_deviation(seed, 200) {
        Ok(dev) => CheckReport {
            name: "tree-marginals-exact",
            passed: dev <= TREE_TOL,
            detail: format!("max deviation {dev:.3e} over 200 single-row/column tables (tolerance {TREE_TOL:.0e})"),
        },
        Err(e) => failed("tree-marginals-exact", e),
    });

    out.push(match posterior_grid_comparison(seed, 2000, 10) {
        Ok(cmp) => CheckReport {
            name: "posterior-grid-vs-exact-joint",
            passed: cmp.max_rel_dev <= GRID_TOL && cmp.argmax_agrees,
            detail: format!(
                "{}x{} instance: max relative log deviation {:.3e} on a 10^3 grid (tolerance {GRID_TOL}), argmax cells {}",
                cmp.n_dest,
                cmp.n_source,
                cmp.max_rel_dev,
                if cmp.argmax_agrees { "agree" } else { "DIFFER" },
            ),
        },
        Err(e) => failed("posterior-grid-vs-exact-joint", e),
    });

    out.push(match quantile_scan_deviation(seed, 200) {
        Ok(dev) => CheckReport {
            name: "quantile-vs-sorted-scan",
            passed: dev == 0.0,
            detail: format!("max deviation {dev:.3e} over 200 random multisets (exact match required)"),
        },
        Err(e) => failed("quantile-vs-sorted-scan", e),
    });

    let dev = hand_value_deviation();
    out.push(CheckReport {
        name: "model-hand-values",
        passed: dev <= HAND_TOL,
        detail: format!("max relative deviation {dev:.3e} against hand-computed densities (tolerance {HAND_TOL:.0e})"),
    });

    out
}

fn failed(name: &'static str, err: impl std::fmt::Display) -> CheckReport {
    CheckReport {
        name,
        passed: false,
        detail: format!("errored: {err}"),
    }
}

fn random_table<R: RngExt>(rng: &mut R, n_dest: usize, n_source: usize) -> BeliefTable {
    let rows = (0..n_dest)
        .map(|_| (0..=n_source).map(|_| rng.random_range(0.05..1.0)).collect())
        .collect();
    BeliefTable::from_rows(rows).expect("positive rows")
}

/// Square table shaped like a real association stage: one dominant distinct
/// candidate per destination, weak cross-talk, moderate miss weight.
fn peaked_table<R: RngExt>(rng: &mut R, side: usize) -> BeliefTable {
    let mut perm: Vec<usize> = (0..side).collect();
    for k in (1..side).rev() {
        perm.swap(k, rng.random_range(0..=k));
    }
    let rows = (0..side)
        .map(|i| {
            let mut row = vec![rng.random_range(0.1..0.4)];
            for j in 0..side {
                row.push(if j == perm[i] {
                    rng.random_range(1.0..3.0)
                } else {
                    rng.random_range(0.01..0.3)
                });
            }
            row
        })
        .collect();
    BeliefTable::from_rows(rows).expect("positive rows")
}

/// Worst deviation of loopy marginals from the enumerated marginals over
/// random peaked tables, measured per entry against the exact row peak.
/// Small entries carry large plain-relative error even at a good fixed
/// point, so the row peak is the honest yardstick.
pub fn loopy_marginals_deviation(
    seed: u64,
    instances: usize,
    side: usize,
) -> Result<f64, BpError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = stream(seed, Domain::Check, k as u64);
        let table = peaked_table(&mut rng, side);
        let approx = run_bp(&table, &BpConfig::default())?;
        let exact = brute_force_marginals(&table)?;
        for (row_a, row_e) in approx.marginals.iter().zip(&exact) {
            let peak = row_e.iter().cloned().fold(0.0, f64::max);
            for (a, e) in row_a.iter().zip(row_e) {
                worst = worst.max((a - e).abs() / peak);
            }
        }
    }
    Ok(worst)
}

/// Worst absolute deviation on tree-shaped instances (one destination or one
/// source), where a single message sweep is exact.
pub fn tree_marginals_deviation(seed: u64, instances: usize) -> Result<f64, BpError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = stream(seed, Domain::Check, k as u64);
        let wide = rng.random_range(1..=4usize);
        let (n_dest, n_source) = if k % 2 == 0 { (1, wide) } else { (wide, 1) };
        let table = random_table(&mut rng, n_dest, n_source);
        let approx = run_bp(&table, &BpConfig::default())?;
        let exact = brute_force_marginals(&table)?;
        for (row_a, row_e) in approx.marginals.iter().zip(&exact) {
            for (a, e) in row_a.iter().zip(row_e) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy)]
pub struct GridComparison {
    pub n_dest: usize,
    pub n_source: usize,
    /// Worst `|approx - exact| / |exact|` of the log densities over the grid.
    pub max_rel_dev: f64,
    /// Whether both log densities peak in the same grid cell.
    pub argmax_agrees: bool,
}

/// Every association vector over `n_dest` slots with values in
/// `0..=n_source`; invalid ones are kept (the exact joint zeroes them).
fn association_vectors(n_dest: usize, n_source: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0usize; n_dest];
    loop {
        out.push(a.clone());
        let mut i = 0;
        loop {
            if i == n_dest {
                return out;
            }
            a[i] += 1;
            if a[i] <= n_source {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let logs: Vec<f64> = terms.filter(|v| *v > f64::NEG_INFINITY).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    peak + logs.iter().map(|v| (v - peak).exp()).sum::<f64>().ln()
}

/// Compares the sample-frozen association surface against direct enumeration
/// of the exact joint on a `grid`^3 lattice of cell centers over the prior
/// box, for one random toy instance with up to 3 points per side.
///
/// The mixture form drops the constant source-count prior
/// `lambda^Ns e^-lambda / Ns!`, so that factor is restored before comparing;
/// the prior density is subtracted out since the enumerated joint has none.
/// Association weights come from loopy propagation, so agreement is bounded
/// by the propagation quality, not float error.
pub fn posterior_grid_comparison(
    seed: u64,
    n_p: usize,
    grid: usize,
) -> Result<GridComparison, MatchError> {
    let mut rng = stream(seed, Domain::Check, 0);
    let n_dest = rng.random_range(1..=3usize);
    let n_source = rng.random_range(1..=3usize);

    // Sources sit well inside the clutter support; destinations are jittered
    // copies so the association weights carry real structure over the box.
    let sources: Vec<Vector2<f64>> = (0..n_source)
        .map(|_| Vector2::new(rng.random_range(1.0..4.0), rng.random_range(-2.0..2.0)))
        .collect();
    let mut dest_points = Vec::with_capacity(n_dest);
    let mut dest_normals = Vec::with_capacity(n_dest);
    for i in 0..n_dest {
        let base = sources[i % n_source];
        dest_points.push(
            base + Vector2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
        );
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        dest_normals.push(Vector2::new(phi.cos(), phi.sin()));
    }

    let models = MeasurementModels {
        error: ErrorModel::new(0.3),
        assoc: AssociabilityModel::new(0.7),
        clutter: ClutterModel::new(1.4, 12.0),
    };
    let prior = PosePrior::new((-0.5, 0.5), (-0.5, 0.5), (-0.3, 0.3));
    let instance =
        MatchInstance::from_parts(sources.clone(), dest_points.clone(), dest_normals.clone(), &models)?;
    let samples = draw_samples(&prior, n_p, &mut stream(seed, Domain::Samples, 1));
    let (beliefs, support) = compute_q_messages(&samples, &instance, &models, false)?;
    let bp = run_bp(&beliefs, &BpConfig::default()).map_err(MatchError::from)?;
    let surface = PosteriorSurface::assemble(models, prior, instance, &bp.messages.nu, support, false);

    let log_count_prior = n_source as f64 * models.clutter.lambda().ln()
        - models.clutter.lambda()
        - (2..=n_source).map(|k| (k as f64).ln()).sum::<f64>();
    let assocs = association_vectors(n_dest, n_source);

    let cell = |lo: f64, hi: f64, k: usize| lo + (k as f64 + 0.5) * (hi - lo) / grid as f64;
    let mut max_rel_dev = 0.0f64;
    let mut best_approx = (f64::NEG_INFINITY, 0usize);
    let mut best_exact = (f64::NEG_INFINITY, 0usize);
    for gx in 0..grid {
        for gy in 0..grid {
            for gt in 0..grid {
                let x = cell(prior.x().0, prior.x().1, gx);
                let y = cell(prior.y().0, prior.y().1, gy);
                let th = cell(prior.theta().0, prior.theta().1, gt);
                let pose = Pose::from_xytheta(x, y, th);
                let approx =
                    surface.log_density(&pose) - prior.log_density(&pose.chart()) + log_count_prior;
                let exact = log_sum_exp(assocs.iter().map(|a| {
                    log_joint_density_exact(&models, &pose, a, &sources, &dest_points, &dest_normals)
                }));
                max_rel_dev = max_rel_dev.max((approx - exact).abs() / exact.abs());
                let idx = (gx * grid + gy) * grid + gt;
                if approx > best_approx.0 {
                    best_approx = (approx, idx);
                }
                if exact > best_exact.0 {
                    best_exact = (exact, idx);
                }
            }
        }
    }

    Ok(GridComparison {
        n_dest,
        n_source,
        max_rel_dev,
        argmax_agrees: best_approx.1 == best_exact.1,
    })
}

/// Worst absolute deviation between `compute_quantile` and a scan of the
/// sorted values for the smallest entry covering the requested fraction.
pub fn quantile_scan_deviation(seed: u64, instances: usize) -> Result<f64, HarnessError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = stream(seed, Domain::Check, k as u64);
        let n = rng.random_range(1..=60usize);
        // Coarse lattice values force ties.
        let values: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..=20u32) as f64 * 0.5)
            .collect();
        let q = rng.random_range(0..=100u32) as f64;
        let fast = compute_quantile(&values, q)?;
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = sorted
            .iter()
            .enumerate()
            .find(|(i, _)| ((i + 1) * 100) as f64 >= q * n as f64)
            .map(|(_, v)| *v)
            .unwrap_or(sorted[n - 1]);
        worst = worst.max((fast - oracle).abs());
    }
    Ok(worst)
}

/// Relative deviation of the clutter density and the zero-residual
/// association weight from values computed by hand:
/// at range 50 with max range 100 the clutter density is 1/(2 pi 100 50);
/// a zero residual at sigma 0.03 scores 0.8 * 13.298 / (1 * f_na).
pub fn hand_value_deviation() -> f64 {
    let clutter = ClutterModel::new(1.0, 100.0);
    let s = Vector2::new(30.0, 40.0);
    let hand_fna = 1.0 / (std::f64::consts::TAU * 100.0 * 50.0);
    let mut worst: f64 = (clutter.density(&s) - hand_fna).abs() / hand_fna;

    let models = MeasurementModels {
        error: ErrorModel::new(0.03),
        assoc: AssociabilityModel::new(0.8),
        clutter,
    };
    // dest = source and identity pose force a zero residual for any normal.
    let q = models.q_assoc(&Pose::identity(), &s, &s, &Vector2::new(0.6, 0.8));
    let hand_q = 0.8 * 13.298 / hand_fna;
    worst.max((q - hand_q).abs() / hand_q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_and_are_deterministic() {
        let first = run_checks(17);
        assert_eq!(first.len(), 5);
        for check in &first {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
        let second = run_checks(17);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.detail, b.detail);
        }
    }

    #[test]
    fn association_vectors_cover_the_mixed_radix_space() {
        let vecs = association_vectors(3, 3);
        assert_eq!(vecs.len(), 64);
        let valid = vecs.iter().filter(|a| crate::bp::validity_psi(a)).count();
        // 1 empty + 9 singles + 18 pairs + 6 permutations.
        assert_eq!(valid, 34);
        assert!(vecs.contains(&vec![0, 0, 0]));
        assert!(vecs.contains(&vec![3, 3, 3]));
    }

    #[test]
    fn grid_comparison_seeds_vary_the_instance_shape() {
        let mut shapes = std::collections::BTreeSet::new();
        for seed in 0..6 {
            let cmp = posterior_grid_comparison(seed, 400, 4).unwrap();
            shapes.insert((cmp.n_dest, cmp.n_source));
            assert!(cmp.max_rel_dev.is_finite());
        }
        assert!(shapes.len() > 1);
    }
}
