//! Per-replica random streams.
//!
//! Each replica owns a `ChaCha8Rng` whose seed is a SplitMix64 hash of
//! `(master_seed, replica_index)`, so a replica's path never depends on how
//! many threads ran or in which order replicas were scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ReplicaRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `index` under `master_seed`.
pub fn replica_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn replica_rng(master_seed: u64, index: u64) -> ReplicaRng {
    ChaCha8Rng::seed_from_u64(replica_seed(master_seed, index))
}

/// Derives an independent master seed for a named sub-experiment.
pub fn derive_seed(master_seed: u64, tag: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Uniform on `(0, 1)`; a zero draw is redrawn.
#[inline]
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// `Exp(rate)` sample as `−ln U / rate`.
#[inline]
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    -open_unit(rng).ln() / rate
}
