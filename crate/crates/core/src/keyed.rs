//! Stable keyed hashing used to derive per-item random streams.
//!
//! `std`'s `DefaultHasher` is not guaranteed stable across releases, and item
//! codes must be reproducible across runs and machines.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed, a string key and a small integer into one 64-bit seed.
pub(crate) fn key_seed(seed: u64, key: &str, salt: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(key.as_bytes())) ^ salt.wrapping_mul(0xd6e8_feb8_6659_fd93))
}
