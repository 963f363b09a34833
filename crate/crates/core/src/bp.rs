//! Loopy sum-product belief propagation for joint data association.
//!
//! Destination point `i` holds an association variable `a_i` in
//! `{0, 1, ..., N_S}` (0 = unassociated); source point `j` holds the mirror
//! variable `b_j`. Pairwise consistency factors forbid `a_i = j` without
//! `b_j = i` and vice versa, which together enforce that no source point is
//! claimed twice. Messages are ratios against the unassociated hypothesis,
//! so each variable exchanges a single scalar per edge per direction:
//!
//! ```text
//! mu[i][j]  = w[i][j] / (w[i][0] + sum_{j' != j} w[i][j'] nu[j'][i])
//! nu[j][i]  = 1 / (1 + sum_{i' != i} mu[i'][j])
//! ```
//!
//! with `nu` initialized to one. On trees (a single destination or a single
//! source) one sweep is exact; on loopy instances the fixed point
//! approximates the marginals. Zero weights propagate exactly (no epsilon
//! flooring), and scaling any row of the table leaves the outputs unchanged
//! because only ratios enter the updates.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BpError {
    #[error("belief row {0} has no positive entry")]
    EmptyRow(usize),
    #[error("belief row {0} contains NaN or +inf")]
    BadWeight(usize),
    #[error("belief table is not rectangular")]
    Ragged,
    #[error("enumeration over {0} association vectors exceeds the 1e6 budget")]
    TooLarge(u128),
    #[error("no valid association has positive weight")]
    Degenerate,
    #[error("non-finite message at iteration {iteration}")]
    NumericFailure { iteration: usize },
}

/// Per-destination association weights `w[i][a_i]`, column 0 being the
/// unassociated hypothesis. Stored in log space; rows are shifted to peak at
/// zero on entry, which the ratio-based updates cannot observe.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTable {
    /// Linear weights after the per-row shift; every row peaks at 1.
    rows: Vec<Vec<f64>>,
    n_source: usize,
}

impl BeliefTable {
    /// `log_rows[i][a]` is the log weight for `a_i = a`; `-inf` encodes an
    /// exact zero. Each row must contain at least one finite entry and no
    /// NaN or +inf anywhere.
    pub fn from_log_rows(log_rows: Vec<Vec<f64>>) -> Result<Self, BpError> {
        let n_source = match log_rows.first() {
            Some(r) if r.is_empty() => return Err(BpError::Ragged),
            Some(r) => r.len() - 1,
            None => 0,
        };
        let mut rows = Vec::with_capacity(log_rows.len());
        for (i, row) in log_rows.iter().enumerate() {
            if row.len() != n_source + 1 {
                return Err(BpError::Ragged);
            }
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(BpError::BadWeight(i));
            }
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if peak == f64::NEG_INFINITY {
                return Err(BpError::EmptyRow(i));
            }
            rows.push(row.iter().map(|v| (v - peak).exp()).collect());
        }
        Ok(BeliefTable { rows, n_source })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, BpError> {
        let log = rows
            .into_iter()
            .map(|r| r.into_iter().map(f64::ln).collect())
            .collect();
        Self::from_log_rows(log)
    }

    pub fn n_dest(&self) -> usize {
        self.rows.len()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    /// Shifted linear weight for `a_i = a`.
    pub fn weight(&self, i: usize, a: usize) -> f64 {
        self.rows[i][a]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub max_iters: usize,
    /// Convergence threshold on the max relative message change.
    pub tol: f64,
    /// Fraction of the previous message kept per update, in `[0, 1)`;
    /// 0 is the undamped default.
    pub damping: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            max_iters: 200,
            tol: 1e-8,
            damping: 0.0,
        }
    }
}

/// Converged messages: `mu[i][j]` destination-to-source, `nu[j][i]`
/// source-to-destination. `nu` is what downstream pose inference consumes as
/// the per-destination association prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpOutcome {
    /// `marginals[i][a]`, rows normalized to sum to one.
    pub marginals: Vec<Vec<f64>>,
    pub messages: MessageState,
    pub iterations: usize,
    pub converged: bool,
}

/// True iff no source index is claimed by more than one destination.
pub fn validity_psi(assoc: &[usize]) -> bool {
    let cap = assoc.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; cap + 1];
    for &a in assoc {
        if a == 0 {
            continue;
        }
        if seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

/// Pairwise consistency factor for destination `i` and source `j` (both
/// 1-based identities; `a_i`, `b_j` use 0 for "none"): false iff exactly one
/// side claims the pairing.
pub fn pair_indicator(a_i: usize, b_j: usize, i: usize, j: usize) -> bool {
    !((a_i == j && b_j != i) || (b_j == i && a_i != j))
}

/// Runs the message iteration to convergence or `max_iters`, whichever comes
/// first, and reads out the approximate association marginals
/// `p(a_i = j) ~ w[i][j] nu[j][i]`.
pub fn run_bp(beliefs: &BeliefTable, config: &BpConfig) -> Result<BpOutcome, BpError> {
    assert!(
        (0.0..1.0).contains(&config.damping),
        "damping must lie in [0, 1)"
    );
    assert!(config.tol > 0.0, "tolerance must be positive");
    let n_d = beliefs.n_dest();
    let n_s = beliefs.n_source();

    let mut mu = vec![vec![0.0; n_s]; n_d];
    let mut nu = vec![vec![1.0; n_d]; n_s];
    let mut iterations = 0;
    let mut converged = n_s == 0 || n_d == 0;

    while !converged && iterations < config.max_iters {
        iterations += 1;
        let mut change: f64 = 0.0;

        for i in 0..n_d {
            let w = &beliefs.rows[i];
            let mut total = w[0];
            for j in 0..n_s {
                total += w[j + 1] * nu[j][i];
            }
            for j in 0..n_s {
                let denom = total - w[j + 1] * nu[j][i];
                let fresh = w[j + 1] / denom;
                let next = config.damping * mu[i][j] + (1.0 - config.damping) * fresh;
                if !next.is_finite() {
                    return Err(BpError::NumericFailure { iteration: iterations });
                }
                change = change.max(rel_change(mu[i][j], next));
                mu[i][j] = next;
            }
        }

        for j in 0..n_s {
            let mut total = 1.0;
            for i in 0..n_d {
                total += mu[i][j];
            }
            for i in 0..n_d {
                let fresh = 1.0 / (total - mu[i][j]);
                let next = config.damping * nu[j][i] + (1.0 - config.damping) * fresh;
                if !next.is_finite() {
                    return Err(BpError::NumericFailure { iteration: iterations });
                }
                change = change.max(rel_change(nu[j][i], next));
                nu[j][i] = next;
            }
        }

        converged = change < config.tol;
    }

    let mut marginals = Vec::with_capacity(n_d);
    for i in 0..n_d {
        let w = &beliefs.rows[i];
        let mut row = vec![0.0; n_s + 1];
        row[0] = w[0];
        for j in 0..n_s {
            row[j + 1] = w[j + 1] * nu[j][i];
        }
        let z: f64 = row.iter().sum();
        debug_assert!(z > 0.0);
        for v in &mut row {
            *v /= z;
        }
        marginals.push(row);
    }

    Ok(BpOutcome {
        marginals,
        messages: MessageState { mu, nu },
        iterations,
        converged,
    })
}

fn rel_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else {
        (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
    }
}

/// Exact association marginals by enumeration over all valid vectors,
/// feasible only far below the table sizes real scans produce. This is the
/// test oracle for `run_bp` and shares none of its message machinery.
pub fn brute_force_marginals(beliefs: &BeliefTable) -> Result<Vec<Vec<f64>>, BpError> {
    let n_d = beliefs.n_dest();
    let n_s = beliefs.n_source();
    let states = (n_s as u128 + 1).pow(n_d as u32);
    if states > 1_000_000 {
        return Err(BpError::TooLarge(states));
    }
    let mut marginals = vec![vec![0.0; n_s + 1]; n_d];
    let mut total = 0.0;
    let mut assoc = vec![0usize; n_d];
    loop {
        if validity_psi(&assoc) {
            let mut weight = 1.0;
            for i in 0..n_d {
                weight *= beliefs.rows[i][assoc[i]];
            }
            total += weight;
            for i in 0..n_d {
                marginals[i][assoc[i]] += weight;
            }
        }
        // Mixed-radix increment over {0..n_s}^{n_d}.
        let mut pos = 0;
        loop {
            if pos == n_d {
                if total <= 0.0 {
                    return Err(BpError::Degenerate);
                }
                for row in &mut marginals {
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                return Ok(marginals);
            }
            assoc[pos] += 1;
            if assoc[pos] <= n_s {
                break;
            }
            assoc[pos] = 0;
            pos += 1;
        }
    }
}
