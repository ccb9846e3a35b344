//! Deterministic derivation of sub-stream seeds from one master seed.

/// splitmix64 step; a well-mixed 64-bit permutation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the parts into one seed; order-sensitive.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3; // arbitrary nonzero start
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Named sub-streams so independent consumers of one master seed never
/// overlap.
pub mod stream {
    pub const GEOMETRY: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SUBSAMPLE: u64 = 4;
    pub const INIT: u64 = 5;
}
