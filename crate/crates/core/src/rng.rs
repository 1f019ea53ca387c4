//! Seed derivation and the generator used everywhere in the crate.
//!
//! All randomness flows from a user-visible 64-bit master seed. Child seeds
//! are derived with the splitmix64 finalizer so that the stream for (seed,
//! index) never depends on how many other streams were drawn before it —
//! this is what makes per-tree and per-replication work schedule-independent.
//! The generator itself is ChaCha8 (counter based, 64-bit seedable).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Golden-ratio increment of splitmix64.
pub const SEED_MIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub type Rng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SEED_MIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `index` under `master`.
#[inline]
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(SEED_MIX_GAMMA))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream labels for the estimation pipeline. Keeping them in one place avoids
// accidental reuse of a stream by two learners.
pub(crate) const STREAM_FOLDS: u64 = 1;
pub(crate) const STREAM_EXPOSURE_MEAN: u64 = 100;
pub(crate) const STREAM_QUANTILE: u64 = 200;
pub(crate) const STREAM_V: u64 = 300;
pub(crate) const STREAM_H: u64 = 400;
pub(crate) const STREAM_LOG_V: u64 = 500;
