//! Small shared helpers.

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for a per-item random stream derived from a run seed and a key.
pub(crate) fn derive_seed(seed: u64, key: &str) -> u64 {
    fnv1a(key.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
