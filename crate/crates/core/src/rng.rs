//! Seeded generators and seed derivation.
//!
//! Every stochastic operation takes an explicit generator. Substreams are
//! derived with a splitmix64 finaliser so that `(seed, index)` pairs map to
//! well-separated generator states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

/// splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of substream `index` from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Substream constructor: `rng_from_seed(derive_seed(seed, index))`.
pub fn substream(seed: u64, index: u64) -> DetRng {
    rng_from_seed(derive_seed(seed, index))
}
