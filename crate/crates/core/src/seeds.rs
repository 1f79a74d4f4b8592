//! Stable seed derivation. `std`'s hashers are randomly keyed per process,
//! so anything that feeds an RNG goes through these instead.

/// 64-bit FNV-1a.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Combines a base seed with a stream key (splitmix64 finaliser).
pub(crate) fn derive_seed(base: u64, key: u64) -> u64 {
    let mut z = base ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
