//! Deterministic seed derivation: one master seed fans out to per-stage and
//! per-rollout streams via splitmix64 over a tag hash, stable across builds.

/// splitmix64 step.
#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes, mixed with the master seed.
pub fn derive(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Indexed sub-stream of a derived seed (per rollout, per subset, ...).
pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(master, tag) ^ splitmix64(index.wrapping_mul(0x9e3779b97f4a7c15)))
}
