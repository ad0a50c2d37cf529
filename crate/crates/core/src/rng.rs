//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`Stream`] derived from a
//! master seed plus a path of integer labels. Derivation is a pure function
//! of `(seed, path)`, so work can be split across threads in any order and
//! still consume exactly the same numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Labels for the top-level stream families.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const MINIBATCH: u64 = 2;
    pub const REALIZATION: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
    pub const COEFFICIENTS: u64 = 6;
    pub const REPLICATE: u64 = 7;
    pub const DIRECTION: u64 = 8;
    pub const TEST: u64 = 9;
    pub const DAMPING: u64 = 10;
    pub const INITIAL_STATE: u64 = 11;
    pub const RHS_ENSEMBLE: u64 = 12;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a path of labels into a single 64-bit key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019))))
}

/// Independent stream for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_key(seed, path))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}
