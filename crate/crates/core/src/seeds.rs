//! Deterministic seed derivation.
//!
//! Every randomized stage gets its own seed derived from the master
//! seed and a purpose tag, so stages stay independent and reordering
//! one sweep never perturbs another.

/// Derive a sub-seed from a master seed and a purpose tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer against the
    // master seed. Stable across platforms and releases.
    splitmix64(master ^ fnv1a(tag.as_bytes()))
}

/// FNV-1a hash; also used to fingerprint configurations.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
