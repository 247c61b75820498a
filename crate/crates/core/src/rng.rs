//! Seedable generator used by every stochastic operation.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

/// xoshiro256** seeded through SplitMix64.
pub type SaimRng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> SaimRng {
    SaimRng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`, e.g. one per training step.
pub fn derived(seed: u64, stream: u64) -> SaimRng {
    // splitmix64 finalizer over the stream index keeps nearby streams decorrelated
    let mut z = stream.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    SaimRng::seed_from_u64(seed ^ z)
}
