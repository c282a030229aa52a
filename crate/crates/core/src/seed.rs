//! Counter-based seed derivation.
//!
//! Every stochastic step (fold shuffles, bootstrap draws, replicate data)
//! gets its own seed derived from a base seed and a path of integers, so
//! results do not depend on the order in which tasks are scheduled.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base` one at a time.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Purpose tags used as the last element of a derivation path.
pub mod tag {
    pub const OUTER_FOLDS: u64 = 1;
    pub const INNER_FOLDS: u64 = 2;
    pub const LEARNER_M: u64 = 3;
    pub const LEARNER_FULL: u64 = 4;
    pub const LEARNER_A: u64 = 5;
    pub const LEARNER_T: u64 = 6;
    pub const LEARNER_RATIO: u64 = 7;
    pub const REPLICATE: u64 = 8;
    pub const WEIGHT_FOLDS: u64 = 9;
}
