//! Seed derivation for reproducible, order-independent sampling.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded with a
//! value derived from a master seed and a path of indices:
//!
//! ```text
//! s_0     = splitmix64(master)
//! s_{k+1} = splitmix64(s_k ^ splitmix64(path[k] + 0x9E3779B97F4A7C15 * (k + 1)))
//! ```
//!
//! Two cells that differ in any path component get unrelated streams, and a
//! cell can be recomputed on its own from `(master, path)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().enumerate().fold(splitmix64(master), |s, (k, &p)| {
        splitmix64(s ^ splitmix64(p.wrapping_add(GOLDEN.wrapping_mul(k as u64 + 1))))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags used as the first path component, so that streams drawn for
/// different purposes within one cell never coincide.
pub mod purpose {
    pub const REINIT: u64 = 1;
    pub const EXPLAIN: u64 = 2;
    pub const INFIDELITY: u64 = 3;
    pub const SENSITIVITY: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const LABELS: u64 = 6;
    pub const DATA: u64 = 7;
    pub const INIT: u64 = 8;
}
