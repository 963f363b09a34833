//! Deterministic stream derivation.
//!
//! Every stochastic operation in the crate consumes an explicit ChaCha8
//! stream derived from a root seed, a domain tag, and an index. ChaCha is
//! counter-based, so streams with distinct (domain, index) keys are
//! statistically independent and any stream can be re-created in isolation;
//! nothing in the pipeline shares or advances a global generator.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tags keep stream keys from colliding across subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// One stream per simulated scan: beam noise, then clutter.
    Scan = 1,
    /// Pose prior sampling inside one match.
    Samples = 2,
    /// Per-trial sub-seed derivation in the benchmark.
    Trial = 3,
    /// Per-frame match seed within a trial.
    Frame = 4,
    /// Random instance generation in the oracle cross-checks.
    Check = 5,
}

/// Stream for `(seed, domain, index)`. Indices above 2^48 are rejected so the
/// domain tag cannot be clobbered.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << 48, "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | index);
    rng
}

/// Collapses a stream to a fresh 64-bit seed, for nested keying such as
/// (benchmark seed, trial) -> trial seed.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    stream(seed, domain, index).random()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let a: Vec<u64> = stream(7, Domain::Scan, 3).random_iter().take(8).collect();
        let b: Vec<u64> = stream(7, Domain::Scan, 3).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_keys_distinct_streams() {
        let base: Vec<u64> = stream(7, Domain::Scan, 3).random_iter().take(4).collect();
        for (seed, domain, index) in [
            (8, Domain::Scan, 3),
            (7, Domain::Samples, 3),
            (7, Domain::Scan, 4),
        ] {
            let other: Vec<u64> = stream(seed, domain, index).random_iter().take(4).collect();
            assert_ne!(base, other);
        }
    }

    #[test]
    fn derived_seeds_are_stable() {
        assert_eq!(
            derive_seed(1, Domain::Trial, 0),
            derive_seed(1, Domain::Trial, 0)
        );
        assert_ne!(
            derive_seed(1, Domain::Trial, 0),
            derive_seed(1, Domain::Trial, 1)
        );
    }
}
