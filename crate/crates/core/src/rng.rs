//! Seeded random streams. All randomness uses ChaCha8 so results match
//! across platforms; independent streams come from `derive_seed`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| {
        splitmix64(acc.wrapping_mul(3) ^ splitmix64(p.wrapping_add(1)))
    })
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Stream identifiers.
pub const SAMPLE: u64 = 1;
pub const SPLIT: u64 = 2;
pub const AUGMENT: u64 = 3;
pub const SHUFFLE: u64 = 4;
pub const DROPOUT: u64 = 5;
pub const SYNTH: u64 = 6;
