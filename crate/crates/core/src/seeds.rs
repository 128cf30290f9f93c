//! Seed derivation. Every random stream in the crate comes from the single
//! user seed mixed with a fixed tag and indices, so streams are independent of
//! iteration order and thread count.

/// Stream tags.
pub const TAG_TOY_WORDS: u64 = 1;
pub const TAG_TOY_AUDIO: u64 = 2;
pub const TAG_TOY_NOISE: u64 = 3;
pub const TAG_TOY_PAIRS: u64 = 4;
pub const TAG_EPISODES: u64 = 5;
pub const TAG_SPLIT: u64 = 6;
pub const TAG_INIT: u64 = 7;
pub const TAG_BATCH: u64 = 8;
pub const TAG_NOISE_MIX: u64 = 9;
pub const TAG_SCATTER: u64 = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base` with SplitMix64 finalisation after each step.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
