//! Pose posterior inference over SE(2).
//!
//! `match_scans` estimates the relative pose between a source scan and a
//! destination surface by integrating the pairing likelihood over pose
//! samples drawn from a box prior, running association belief propagation
//! once on the integrated weights, and then treating the converged
//! source-to-destination messages as fixed mixture weights in a continuous
//! posterior surface:
//!
//! ```text
//! log f(dP | z) ~ log prior(dP) + log v(s)
//!                 + sum_i log[ (1 - f_a) + sum_j nu[j][i] q_ij(dP) ]
//! ```
//!
//! where `q_ij` is the association weight of pairing destination `i` with
//! source `j` and `v` is the clutter product over the source scan. The MAP
//! estimate starts from the best pose sample and is refined on the
//! `(x, y, theta)` chart within the prior box.
//!
//! Everything downstream of the sample draw is a pure function of the
//! inputs: the sample integration reduces in fixed chunk order, BP sweeps
//! are synchronized, and refinement is sequential, so a (config, seed) pair
//! reproduces results bit for bit regardless of thread count.

use nalgebra::Vector2;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{run_bp, BeliefTable, BpConfig, BpError};
use crate::cloud::{SourceCloud, SurfaceCloud};
use crate::model::{log_clutter_product, ErrorModel, MeasurementModels};
use crate::rng::{stream, Domain};
use crate::se2::{Pose, PoseChart};

/// Samples are integrated in fixed-size blocks so the log-sum-exp reduction
/// order is independent of the rayon thread count.
const SAMPLE_CHUNK: usize = 128;

/// Residual cutoff for candidate pruning, in units of sigma_e. A pair this
/// far out contributes less than e^-18 of a peak term.
const PRUNE_SIGMAS: f64 = 6.0;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("destination surface has no valid normals")]
    EmptyDestination,
    #[error("no association weight survives for destination {dest}")]
    DegenerateEvidence { dest: usize },
    #[error("association stage failed: {0}")]
    Association(#[from] BpError),
    #[error("objective is not finite at the refinement start")]
    NonFiniteStart,
}

/// Independent uniform box prior over the pose chart. A zero-width
/// dimension pins that coordinate exactly and contributes no density term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    x: (f64, f64),
    y: (f64, f64),
    theta: (f64, f64),
}

impl PosePrior {
    pub fn new(x: (f64, f64), y: (f64, f64), theta: (f64, f64)) -> Self {
        for (lo, hi) in [x, y, theta] {
            assert!(lo.is_finite() && hi.is_finite() && lo <= hi);
        }
        assert!(
            theta.0 >= -std::f64::consts::PI && theta.1 <= std::f64::consts::PI,
            "rotation interval must lie within [-pi, pi]"
        );
        PosePrior { x, y, theta }
    }

    pub fn x(&self) -> (f64, f64) {
        self.x
    }

    pub fn y(&self) -> (f64, f64) {
        self.y
    }

    pub fn theta(&self) -> (f64, f64) {
        self.theta
    }

    pub fn contains(&self, chart: &PoseChart) -> bool {
        self.x.0 <= chart.x
            && chart.x <= self.x.1
            && self.y.0 <= chart.y
            && chart.y <= self.y.1
            && self.theta.0 <= chart.theta
            && chart.theta <= self.theta.1
    }

    /// Log density of the uniform box, `-inf` outside.
    pub fn log_density(&self, chart: &PoseChart) -> f64 {
        if !self.contains(chart) {
            return f64::NEG_INFINITY;
        }
        let mut log_d = 0.0;
        for (lo, hi) in [self.x, self.y, self.theta] {
            if hi > lo {
                log_d -= (hi - lo).ln();
            }
        }
        log_d
    }

    pub fn sample<R: RngExt>(&self, rng: &mut R) -> PoseChart {
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        PoseChart {
            x: draw(self.x),
            y: draw(self.y),
            theta: draw(self.theta),
        }
    }

    fn clamp(&self, c: [f64; 3]) -> [f64; 3] {
        [
            c[0].clamp(self.x.0, self.x.1),
            c[1].clamp(self.y.0, self.y.1),
            c[2].clamp(self.theta.0, self.theta.1),
        ]
    }
}

impl Default for PosePrior {
    fn default() -> Self {
        PosePrior::new(
            (-10.0, 10.0),
            (-10.0, 10.0),
            (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
        )
    }
}

#[derive(Debug, Clone)]
pub struct PoseSampleSet {
    poses: Vec<Pose>,
    charts: Vec<PoseChart>,
}

impl PoseSampleSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn charts(&self) -> &[PoseChart] {
        &self.charts
    }
}

/// Draws `n_p` i.i.d. poses from the prior box, coordinates in (x, y,
/// theta) order per sample.
pub fn draw_samples<R: RngExt>(prior: &PosePrior, n_p: usize, rng: &mut R) -> PoseSampleSet {
    assert!(n_p >= 1, "need at least one pose sample");
    let charts: Vec<PoseChart> = (0..n_p).map(|_| prior.sample(rng)).collect();
    let poses = charts.iter().map(Pose::from_chart).collect();
    PoseSampleSet { poses, charts }
}

/// A scan pair reduced to what inference consumes: sources inside the
/// clutter support (anything else would zero the clutter product), the
/// destination compacted to points with valid normals, and the per-point
/// constants both hot loops reuse.
#[derive(Debug, Clone)]
pub struct MatchInstance {
    sources: Vec<Vector2<f64>>,
    log_fna: Vec<f64>,
    dest_points: Vec<Vector2<f64>>,
    dest_normals: Vec<Vector2<f64>>,
    /// `n_i . d_i`; the residual against source j is this minus `n_i . (dP s_j)`.
    dest_offsets: Vec<f64>,
    dropped_sources: usize,
}

impl MatchInstance {
    pub fn prepare(
        source: &SourceCloud,
        dest: &SurfaceCloud,
        models: &MeasurementModels,
    ) -> Result<Self, MatchError> {
        let (dest_points, dest_normals) = dest.compact();
        if dest_points.is_empty() {
            return Err(MatchError::EmptyDestination);
        }
        let mut sources = Vec::with_capacity(source.len());
        let mut log_fna = Vec::with_capacity(source.len());
        for s in source.points() {
            if models.clutter.in_support(s) {
                log_fna.push(models.clutter.log_density(s));
                sources.push(*s);
            }
        }
        let dropped_sources = source.len() - sources.len();
        let dest_offsets = dest_points
            .iter()
            .zip(&dest_normals)
            .map(|(d, n)| n.dot(d))
            .collect();
        Ok(MatchInstance {
            sources,
            log_fna,
            dest_points,
            dest_normals,
            dest_offsets,
            dropped_sources,
        })
    }

    /// Test/bench constructor for hand-built geometry.
    pub fn from_parts(
        sources: Vec<Vector2<f64>>,
        dest_points: Vec<Vector2<f64>>,
        dest_normals: Vec<Vector2<f64>>,
        models: &MeasurementModels,
    ) -> Result<Self, MatchError> {
        let source = SourceCloud::new(sources).expect("finite source points");
        let valid = vec![true; dest_points.len()];
        let dest = SurfaceCloud::new(dest_points, dest_normals, valid).expect("valid surface");
        Self::prepare(&source, &dest, models)
    }

    pub fn n_dest(&self) -> usize {
        self.dest_points.len()
    }

    pub fn n_source(&self) -> usize {
        self.sources.len()
    }

    pub fn dropped_sources(&self) -> usize {
        self.dropped_sources
    }

    pub fn sources(&self) -> &[Vector2<f64>] {
        &self.sources
    }

    pub fn dest_points(&self) -> &[Vector2<f64>] {
        &self.dest_points
    }

    pub fn dest_normals(&self) -> &[Vector2<f64>] {
        &self.dest_normals
    }
}

/// Which (destination, source) pairs ever came within the pruning cutoff.
/// With pruning disabled every pair is admitted.
#[derive(Debug, Clone)]
pub struct SupportMask {
    mask: Vec<bool>,
    n_source: usize,
}

impl SupportMask {
    pub fn full(n_dest: usize, n_source: usize) -> Self {
        SupportMask {
            mask: vec![true; n_dest * n_source],
            n_source,
        }
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_source + j]
    }
}

/// Streaming log-sum-exp state: `m` tracks the running max, `s` the sum of
/// `exp(x - m)` over pushed terms.
#[derive(Clone, Copy)]
struct Lse {
    m: f64,
    s: f64,
}

impl Lse {
    const EMPTY: Lse = Lse {
        m: f64::NEG_INFINITY,
        s: 0.0,
    };

    #[inline]
    fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.m {
            self.s += (x - self.m).exp();
        } else {
            self.s = self.s * (self.m - x).exp() + 1.0;
            self.m = x;
        }
    }

    fn merge(&mut self, other: Lse) {
        if other.s == 0.0 {
            return;
        }
        if self.s == 0.0 {
            *self = other;
        } else if other.m <= self.m {
            self.s += other.s * (other.m - self.m).exp();
        } else {
            self.s = self.s * (self.m - other.m).exp() + other.s;
            self.m = other.m;
        }
    }

    fn value(&self) -> f64 {
        if self.s == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.m + self.s.ln()
        }
    }
}

struct ChunkAccum {
    table: Vec<Lse>,
    support: Vec<bool>,
}

/// Integrates the per-pair association weights over the pose samples:
/// `beta_i(a) = sum_p q_i(dP_p, a) v(dP_p)`, accumulated in log space. The
/// reduction runs over fixed 128-sample chunks merged in order, so results
/// do not depend on the worker count. With `pruning` set, terms whose
/// residual magnitude exceeds `6 sigma_e` are treated as exact zeros; pairs
/// with no surviving term anywhere are reported excluded in the mask.
pub fn compute_q_messages(
    samples: &PoseSampleSet,
    instance: &MatchInstance,
    models: &MeasurementModels,
    pruning: bool,
) -> Result<(BeliefTable, SupportMask), MatchError> {
    let n_d = instance.n_dest();
    let n_s = instance.n_source();
    let cols = n_s + 1;
    let cutoff = PRUNE_SIGMAS * models.error.sigma();
    let log_miss = models.log_q_miss();
    // The clutter model is pose-independent, so the per-sample clutter
    // product collapses to one constant for the whole draw.
    let log_v = log_clutter_product(&models.clutter, &Pose::identity(), &instance.sources);

    let chunks: Vec<ChunkAccum> = samples
        .poses
        .par_chunks(SAMPLE_CHUNK)
        .map(|block| {
            let mut acc = ChunkAccum {
                table: vec![Lse::EMPTY; n_d * cols],
                support: vec![false; n_d * n_s],
            };
            let mut transformed = vec![Vector2::zeros(); n_s];
            // Residuals for one destination row, filled branch-free so the
            // fill vectorizes; only the scan below branches.
            let mut residuals = vec![0.0f64; n_s];
            for pose in block {
                for (t, s) in transformed.iter_mut().zip(&instance.sources) {
                    *t = pose.transform(s);
                }
                for i in 0..n_d {
                    let row = &mut acc.table[i * cols..(i + 1) * cols];
                    row[0].push(log_miss + log_v);
                    let n = instance.dest_normals[i];
                    let c = instance.dest_offsets[i];
                    for (r, t) in residuals.iter_mut().zip(&transformed) {
                        *r = c - n.dot(t);
                    }
                    for (j, &e) in residuals.iter().enumerate() {
                        if pruning && e.abs() > cutoff {
                            continue;
                        }
                        row[j + 1].push(models.log_q_assoc_parts(e, instance.log_fna[j]) + log_v);
                        acc.support[i * n_s + j] = true;
                    }
                }
            }
            acc
        })
        .collect();

    let mut table = vec![Lse::EMPTY; n_d * cols];
    let mut mask = vec![false; n_d * n_s];
    for chunk in chunks {
        for (cell, part) in table.iter_mut().zip(chunk.table) {
            cell.merge(part);
        }
        for (m, p) in mask.iter_mut().zip(chunk.support) {
            *m |= p;
        }
    }

    let mut rows = Vec::with_capacity(n_d);
    for i in 0..n_d {
        let row: Vec<f64> = table[i * cols..(i + 1) * cols]
            .iter()
            .map(Lse::value)
            .collect();
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(MatchError::DegenerateEvidence { dest: i });
        }
        rows.push(row);
    }
    let beliefs = BeliefTable::from_log_rows(rows).map_err(MatchError::Association)?;
    Ok((
        beliefs,
        SupportMask {
            mask,
            n_source: n_s,
        },
    ))
}

/// Continuous unnormalized log posterior with the association layer frozen:
/// per destination, a mixture of the miss weight and the per-source
/// association weights scaled by the converged incoming messages.
#[derive(Debug, Clone)]
pub struct PosteriorSurface {
    models: MeasurementModels,
    prior: PosePrior,
    instance: MatchInstance,
    /// `log nu[j][i]` transposed to destination-major order.
    log_weights: Vec<f64>,
    support: SupportMask,
    pruning: bool,
    log_v: f64,
}

impl PosteriorSurface {
    /// `nu[j][i]` are the source-to-destination messages from BP (all ones
    /// reproduces the unweighted mixture).
    pub fn assemble(
        models: MeasurementModels,
        prior: PosePrior,
        instance: MatchInstance,
        nu: &[Vec<f64>],
        support: SupportMask,
        pruning: bool,
    ) -> Self {
        let n_d = instance.n_dest();
        let n_s = instance.n_source();
        assert_eq!(nu.len(), n_s);
        let mut log_weights = vec![0.0; n_d * n_s];
        for (j, col) in nu.iter().enumerate() {
            assert_eq!(col.len(), n_d);
            for i in 0..n_d {
                log_weights[i * n_s + j] = col[i].ln();
            }
        }
        let log_v = log_clutter_product(&models.clutter, &Pose::identity(), &instance.sources);
        PosteriorSurface {
            models,
            prior,
            instance,
            log_weights,
            support,
            pruning,
            log_v,
        }
    }

    pub fn instance(&self) -> &MatchInstance {
        &self.instance
    }

    pub fn prior(&self) -> &PosePrior {
        &self.prior
    }

    /// Log of the per-destination mixture `(1 - f_a) + sum_j nu q_ij(dP)`.
    pub fn log_out_message(&self, i: usize, pose: &Pose) -> f64 {
        let transformed: Vec<Vector2<f64>> =
            self.instance.sources.iter().map(|s| pose.transform(s)).collect();
        self.log_out_message_with(i, &transformed)
    }

    fn log_out_message_with(&self, i: usize, transformed: &[Vector2<f64>]) -> f64 {
        self.log_out_message_at(i, transformed, &self.models.error)
    }

    fn log_out_message_at(
        &self,
        i: usize,
        transformed: &[Vector2<f64>],
        error: &ErrorModel,
    ) -> f64 {
        let n_s = self.instance.n_source();
        let cutoff = PRUNE_SIGMAS * error.sigma();
        let n = self.instance.dest_normals[i];
        let c = self.instance.dest_offsets[i];
        let mut lse = Lse::EMPTY;
        lse.push(self.models.log_q_miss());
        for j in 0..n_s {
            if !self.support.admits(i, j) {
                continue;
            }
            let e = c - n.dot(&transformed[j]);
            if self.pruning && e.abs() > cutoff {
                continue;
            }
            lse.push(
                self.models.log_q_assoc_parts_at(e, self.instance.log_fna[j], error)
                    + self.log_weights[i * n_s + j],
            );
        }
        lse.value()
    }

    /// Unnormalized log posterior; `-inf` outside the prior box.
    pub fn log_density(&self, pose: &Pose) -> f64 {
        self.log_density_at(pose, &self.models.error)
    }

    /// The posterior with residuals scored under a substitute error scale.
    /// Association weights stay frozen, so at the true scale this is
    /// exactly `log_density`. Wider scales give a smoothed surface whose
    /// coarse structure survives far from the modes.
    pub fn log_density_at(&self, pose: &Pose, error: &ErrorModel) -> f64 {
        let chart = pose.chart();
        let log_prior = self.prior.log_density(&chart);
        if log_prior == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let transformed: Vec<Vector2<f64>> =
            self.instance.sources.iter().map(|s| pose.transform(s)).collect();
        let mut total = log_prior + self.log_v;
        for i in 0..self.instance.n_dest() {
            total += self.log_out_message_at(i, &transformed, error);
        }
        total
    }

    fn log_density_chart(&self, chart: [f64; 3]) -> f64 {
        self.log_density(&Pose::from_xytheta(chart[0], chart[1], chart[2]))
    }

    /// `log_density` plus a smoothed seeding score from the same pass over
    /// the pairs. The first output is bit-identical to `log_density` (same
    /// terms, same order). The second approximates each destination's
    /// coarse-scale mixture by its dominant term plus a mixture-size
    /// correction, `peak + ln(1 + survivors)`: exact when the surviving
    /// terms are equal (points along one wall), within `ln k` of the true
    /// log-sum-exp otherwise, and free of per-pair transcendentals. The
    /// ladder stages re-evaluate the true smoothed surface anyway.
    pub fn log_density_with_coarse_seed(&self, pose: &Pose, coarse: &ErrorModel) -> (f64, f64) {
        let chart = pose.chart();
        let log_prior = self.prior.log_density(&chart);
        if log_prior == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, f64::NEG_INFINITY);
        }
        let transformed: Vec<Vector2<f64>> =
            self.instance.sources.iter().map(|s| pose.transform(s)).collect();
        let n_s = self.instance.n_source();
        let fine = &self.models.error;
        let fine_cutoff = PRUNE_SIGMAS * fine.sigma();
        let coarse_cutoff = PRUNE_SIGMAS * coarse.sigma();
        let log_miss = self.models.log_q_miss();
        let base = log_prior + self.log_v;
        let (mut fine_total, mut coarse_total) = (base, base);
        let mut residuals = vec![0.0f64; n_s];
        for i in 0..self.instance.n_dest() {
            let n = self.instance.dest_normals[i];
            let c = self.instance.dest_offsets[i];
            for (r, t) in residuals.iter_mut().zip(&transformed) {
                *r = c - n.dot(t);
            }
            let mut fine_lse = Lse::EMPTY;
            fine_lse.push(log_miss);
            let mut coarse_peak = log_miss;
            let mut coarse_survivors = 0usize;
            for (j, &e) in residuals.iter().enumerate() {
                if !self.support.admits(i, j) {
                    continue;
                }
                if !(self.pruning && e.abs() > fine_cutoff) {
                    fine_lse.push(
                        self.models.log_q_assoc_parts_at(e, self.instance.log_fna[j], fine)
                            + self.log_weights[i * n_s + j],
                    );
                }
                // The seed cutoff applies regardless of the pruning flag:
                // beyond it a term sits 18 nats under the in-cutoff peak
                // and cannot move either the peak or the coherence count.
                if e.abs() <= coarse_cutoff {
                    let term = self
                        .models
                        .log_q_assoc_parts_at(e, self.instance.log_fna[j], coarse)
                        + self.log_weights[i * n_s + j];
                    coarse_survivors += 1;
                    if term > coarse_peak {
                        coarse_peak = term;
                    }
                }
            }
            fine_total += fine_lse.value();
            coarse_total += coarse_peak + (1.0 + coarse_survivors as f64).ln();
        }
        (fine_total, coarse_total)
    }
}

/// Evaluates the surface at every sample. Values are independent per
/// sample, so the parallel map is deterministic.
pub fn sample_log_posteriors(surface: &PosteriorSurface, samples: &PoseSampleSet) -> Vec<f64> {
    samples
        .poses
        .par_iter()
        .map(|pose| surface.log_density(pose))
        .collect()
}

/// `sample_log_posteriors` plus the coarse seeding scores, sharing the
/// per-sample residual work.
pub fn sample_log_posteriors_with_coarse_seed(
    surface: &PosteriorSurface,
    samples: &PoseSampleSet,
    coarse: &ErrorModel,
) -> (Vec<f64>, Vec<f64>) {
    samples
        .poses
        .par_iter()
        .map(|pose| surface.log_density_with_coarse_seed(pose, coarse))
        .unzip()
}

/// Best sample by cached posterior value, ties to the lowest index.
pub fn initial_guess(samples: &PoseSampleSet, log_posteriors: &[f64]) -> (usize, Pose) {
    assert_eq!(samples.len(), log_posteriors.len());
    assert!(!samples.is_empty());
    let mut best = 0;
    for (p, &v) in log_posteriors.iter().enumerate() {
        if v > log_posteriors[best] {
            best = p;
        }
    }
    (best, samples.poses[best])
}

/// Effective sample size `(sum w)^2 / sum w^2` of the self-normalized
/// posterior weights; `n_p` when flat, near 1 when one sample dominates.
pub fn effective_sample_size(log_posteriors: &[f64]) -> f64 {
    let peak = log_posteriors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return 0.0;
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for &v in log_posteriors {
        let w = (v - peak).exp();
        sum += w;
        sum_sq += w * w;
    }
    sum * sum / sum_sq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refiner {
    NelderMead,
    GradientAscent,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOutcome {
    pub chart: PoseChart,
    pub log_posterior: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Local ascent on the chart within the prior box, starting from `start`.
/// The returned value never falls below the start value. Nelder-Mead keeps
/// its best vertex, the gradient path only accepts improvements, and every
/// probe is clamped into the box. The start chart itself is projected into
/// the box first (chart round-trips can land a boundary sample an ulp
/// outside); a non-finite objective after projection is an error.
pub fn refine_map(
    start: &Pose,
    surface: &PosteriorSurface,
    max_iters: usize,
    refiner: Refiner,
) -> Result<RefineOutcome, MatchError> {
    let c = start.chart();
    let x0 = surface.prior.clamp([c.x, c.y, c.theta]);
    let f0 = surface.log_density_chart(x0);
    if !f0.is_finite() {
        return Err(MatchError::NonFiniteStart);
    }
    let objective = RefineObjective {
        surface,
        error: surface.models.error,
    };
    let out = match refiner {
        Refiner::NelderMead => nelder_mead(&objective, x0, f0, max_iters),
        Refiner::GradientAscent => gradient_ascent(&objective, x0, f0, max_iters),
    };
    debug_assert!(out.log_posterior >= f0);
    Ok(out)
}

/// Error-scale multipliers for coarse-to-fine refinement, widest first.
const REFINE_LADDER: [f64; 4] = [16.0, 8.0, 4.0, 2.0];

/// Refinement objective: the posterior scored at a configurable error
/// scale. At the surface's own scale it reproduces `log_density` exactly.
struct RefineObjective<'a> {
    surface: &'a PosteriorSurface,
    error: ErrorModel,
}

impl RefineObjective<'_> {
    fn eval(&self, chart: [f64; 3]) -> f64 {
        self.surface
            .log_density_at(&Pose::from_xytheta(chart[0], chart[1], chart[2]), &self.error)
    }
}

/// Coarse-to-fine search for the posterior mode.
///
/// The posterior is far narrower than the prior box: mode basins span
/// roughly `sigma_e * sqrt(2 ln q_max)` in translation, centimeters under
/// typical settings, so the best of a few thousand prior samples almost
/// never lands inside one and a single local refinement stalls on the flat
/// clutter floor in between. Widening the error scale smooths the surface
/// until its basins reach sample spacing; each stage halves the scale and
/// restarts the local optimizer from the previous result, and the final
/// stage runs on the true surface. The ladder starts from the sample with
/// the best coarse seeding score (`coarse_logs`). The plain path, refining
/// the best sample directly, runs as well and the higher finisher wins, so
/// this never returns less than single-stage refinement.
fn refine_continuation(
    samples: &PoseSampleSet,
    surface: &PosteriorSurface,
    init_pose: &Pose,
    coarse_logs: &[f64],
    config: &MatchConfig,
) -> Result<RefineOutcome, MatchError> {
    let sigma = surface.models.error.sigma();
    let run_stage = |objective: &RefineObjective, chart: [f64; 3], f0: f64| match config.refiner {
        Refiner::NelderMead => nelder_mead(objective, chart, f0, config.n_it),
        Refiner::GradientAscent => gradient_ascent(objective, chart, f0, config.n_it),
    };

    let (_, coarse_pose) = initial_guess(samples, coarse_logs);
    let c = coarse_pose.chart();
    let mut chart = surface.prior.clamp([c.x, c.y, c.theta]);
    let mut ladder_iterations = 0;
    for mult in REFINE_LADDER {
        let objective = RefineObjective {
            surface,
            error: ErrorModel::new(sigma * mult),
        };
        let f0 = objective.eval(chart);
        if !f0.is_finite() {
            break;
        }
        let out = run_stage(&objective, chart, f0);
        chart = surface.prior.clamp([out.chart.x, out.chart.y, out.chart.theta]);
        ladder_iterations += out.iterations;
    }

    let from_ladder = refine_map(
        &Pose::from_xytheta(chart[0], chart[1], chart[2]),
        surface,
        config.n_it,
        config.refiner,
    )?;
    let from_init = refine_map(init_pose, surface, config.n_it, config.refiner)?;
    let total_iterations = ladder_iterations + from_ladder.iterations + from_init.iterations;
    let mut best = if from_ladder.log_posterior >= from_init.log_posterior {
        from_ladder
    } else {
        from_init
    };
    best.iterations = total_iterations;
    Ok(best)
}

fn nelder_mead(
    objective: &RefineObjective,
    x0: [f64; 3],
    f0: f64,
    max_iters: usize,
) -> RefineOutcome {
    const DIAM_TOL: f64 = 1e-10;
    const SPREAD_TOL: f64 = 1e-12;
    let prior = &objective.surface.prior;
    // Initial simplex: steps of a quarter box side, capped at 0.25 m and
    // ~2.5 degrees, flipped when they would leave the box. Zero-width
    // dimensions get no vertex offset and stay pinned.
    let caps = [0.25, 0.25, 0.04363323129985824];
    let spans = [
        (prior.x.1 - prior.x.0) / 4.0,
        (prior.y.1 - prior.y.0) / 4.0,
        (prior.theta.1 - prior.theta.0) / 4.0,
    ];
    let mut verts = vec![(x0, f0)];
    for d in 0..3 {
        let mut v = x0;
        let step = spans[d].min(caps[d]);
        v[d] = if v[d] + step <= [prior.x.1, prior.y.1, prior.theta.1][d] {
            v[d] + step
        } else {
            v[d] - step
        };
        let v = prior.clamp(v);
        verts.push((v, objective.eval(v)));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        // Descending by value: verts[0] best, verts[3] worst.
        verts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

        let diam = (1..4)
            .map(|k| {
                (0..3)
                    .map(|d| (verts[k].0[d] - verts[0].0[d]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if diam < DIAM_TOL || verts[0].1 - verts[3].1 < SPREAD_TOL {
            converged = true;
            break;
        }

        let mut cen = [0.0; 3];
        for v in verts.iter().take(3) {
            for d in 0..3 {
                cen[d] += v.0[d] / 3.0;
            }
        }
        let worst = verts[3];
        let probe = |t: f64| {
            let p = prior.clamp([
                cen[0] + t * (cen[0] - worst.0[0]),
                cen[1] + t * (cen[1] - worst.0[1]),
                cen[2] + t * (cen[2] - worst.0[2]),
            ]);
            (p, objective.eval(p))
        };

        let refl = probe(1.0);
        if refl.1 > verts[0].1 {
            let exp = probe(2.0);
            verts[3] = if exp.1 > refl.1 { exp } else { refl };
        } else if refl.1 > verts[2].1 {
            verts[3] = refl;
        } else {
            let con = if refl.1 > verts[3].1 {
                probe(0.5)
            } else {
                probe(-0.5)
            };
            if con.1 > refl.1.max(verts[3].1) {
                verts[3] = con;
            } else {
                // Shrink toward the best vertex.
                for k in 1..4 {
                    let mut v = [0.0; 3];
                    for d in 0..3 {
                        v[d] = verts[0].0[d] + 0.5 * (verts[k].0[d] - verts[0].0[d]);
                    }
                    let v = prior.clamp(v);
                    verts[k] = (v, objective.eval(v));
                }
            }
        }
    }

    verts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let (best, f_best) = verts[0];
    RefineOutcome {
        chart: PoseChart {
            x: best[0],
            y: best[1],
            theta: best[2],
        },
        log_posterior: f_best,
        iterations,
        converged,
    }
}

fn gradient_ascent(
    objective: &RefineObjective,
    mut x: [f64; 3],
    mut f: f64,
    max_iters: usize,
) -> RefineOutcome {
    const FD_STEP: f64 = 1e-6;
    const GRAD_TOL: f64 = 1e-9;
    const STEP_MAX: f64 = 1.0;
    let surface = objective.surface;
    let prior = &surface.prior;
    // A radian moves a point by its radius, so the rotation coordinate is
    // rescaled by the mean source radius to even out the curvature.
    let n_src = surface.instance.n_source();
    let th_scale = if n_src == 0 {
        1.0
    } else {
        (surface.instance.sources.iter().map(|s| s.norm()).sum::<f64>() / n_src as f64).max(1.0)
    };
    let mut iterations = 0;
    let mut converged = false;
    // Step length carries over between iterations: backtrack on failure,
    // expand while the objective keeps improving.
    let mut step = 0.05;
    while iterations < max_iters {
        iterations += 1;
        let mut g = [0.0; 3];
        for d in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[d] += FD_STEP;
            lo[d] -= FD_STEP;
            let (hi, lo) = (prior.clamp(hi), prior.clamp(lo));
            let span = hi[d] - lo[d];
            g[d] = if span > 0.0 {
                (objective.eval(hi) - objective.eval(lo)) / span
            } else {
                0.0
            };
        }
        let g_scaled = [g[0], g[1], g[2] / th_scale];
        let norm = (g_scaled[0] * g_scaled[0]
            + g_scaled[1] * g_scaled[1]
            + g_scaled[2] * g_scaled[2])
            .sqrt();
        if norm < GRAD_TOL {
            converged = true;
            break;
        }
        let dir = [
            g_scaled[0] / norm,
            g_scaled[1] / norm,
            g_scaled[2] / norm / th_scale,
        ];
        let probe = |s: f64| {
            let xn = prior.clamp([x[0] + s * dir[0], x[1] + s * dir[1], x[2] + s * dir[2]]);
            (xn, objective.eval(xn))
        };
        let mut accepted = None;
        while step > 1e-14 {
            let (xn, fn_) = probe(step);
            if fn_ > f {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((mut xb, mut fb)) = accepted else {
            converged = true;
            break;
        };
        while step < STEP_MAX {
            let (xn, fn_) = probe(step * 2.0);
            if fn_ > fb {
                xb = xn;
                fb = fn_;
                step *= 2.0;
            } else {
                break;
            }
        }
        x = xb;
        f = fb;
    }
    RefineOutcome {
        chart: PoseChart {
            x: x[0],
            y: x[1],
            theta: x[2],
        },
        log_posterior: f,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub models: MeasurementModels,
    pub prior: PosePrior,
    /// Pose samples drawn from the prior.
    pub n_p: usize,
    pub bp: BpConfig,
    /// Refinement iteration cap.
    pub n_it: usize,
    pub pruning: bool,
    pub refiner: Refiner,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            models: MeasurementModels::default(),
            prior: PosePrior::default(),
            n_p: 2000,
            bp: BpConfig::default(),
            n_it: 100,
            pruning: true,
            refiner: Refiner::NelderMead,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub bp_iterations: usize,
    pub bp_converged: bool,
    pub refine_iterations: usize,
    pub refine_converged: bool,
    pub sample_ess: f64,
    pub initial_sample_index: usize,
    pub log_posterior_at_init: f64,
    pub dropped_sources: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub map_pose: PoseChart,
    pub log_posterior_at_map: f64,
    /// Per-destination association distribution, column 0 = unassociated.
    pub association_marginals: Vec<Vec<f64>>,
    pub diagnostics: MatchDiagnostics,
}

impl MatchResult {
    pub fn pose(&self) -> Pose {
        Pose::from_chart(&self.map_pose)
    }
}

/// Full matching pipeline: prepare, sample, integrate, associate, assemble,
/// pick the best sample, refine. Deterministic in (inputs, config.seed).
pub fn match_scans(
    source: &SourceCloud,
    dest: &SurfaceCloud,
    config: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let instance = MatchInstance::prepare(source, dest, &config.models)?;
    let dropped_sources = instance.dropped_sources();

    let mut rng = stream(config.seed, Domain::Samples, 0);
    let samples = draw_samples(&config.prior, config.n_p, &mut rng);

    let (beliefs, support) =
        compute_q_messages(&samples, &instance, &config.models, config.pruning)?;
    let bp_out = run_bp(&beliefs, &config.bp)?;

    let surface = PosteriorSurface::assemble(
        config.models,
        config.prior,
        instance,
        &bp_out.messages.nu,
        support,
        config.pruning,
    );
    let coarse = ErrorModel::new(config.models.error.sigma() * REFINE_LADDER[0]);
    let (log_posts, coarse_logs) =
        sample_log_posteriors_with_coarse_seed(&surface, &samples, &coarse);
    let (init_idx, init_pose) = initial_guess(&samples, &log_posts);
    let refined = refine_continuation(&samples, &surface, &init_pose, &coarse_logs, config)?;

    Ok(MatchResult {
        map_pose: refined.chart,
        log_posterior_at_map: refined.log_posterior,
        association_marginals: bp_out.marginals,
        diagnostics: MatchDiagnostics {
            bp_iterations: bp_out.iterations,
            bp_converged: bp_out.converged,
            refine_iterations: refined.iterations,
            refine_converged: refined.converged,
            sample_ess: effective_sample_size(&log_posts),
            initial_sample_index: init_idx,
            log_posterior_at_init: log_posts[init_idx],
            dropped_sources,
        },
    })
}
