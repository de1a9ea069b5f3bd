//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`: the stream
//! name is hashed with 64-bit FNV-1a, and the three words are folded through
//! the SplitMix64 finalizer. Draws for a given layer element therefore do not
//! depend on iteration order or thread scheduling.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Raw 64-bit draw keyed by `(seed, stream, counter)`.
pub fn counter_u64(seed: u64, stream: &str, counter: u64) -> u64 {
    let mut z = mix(seed.wrapping_add(GOLDEN));
    z = mix(z ^ fnv1a(stream.as_bytes()));
    mix(z ^ counter.wrapping_add(1).wrapping_mul(GOLDEN))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
pub fn counter_uniform(seed: u64, stream: &str, counter: u64) -> f64 {
    (counter_u64(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
