//! Seed derivation and counter-based random values.
//!
//! All randomness in the pipeline flows from one global seed. Submodule seeds
//! are derived by hashing (seed, purpose string) so that adding a new consumer
//! never shifts the stream of an existing one. Dropout masks use a stateless
//! counter scheme keyed on (seed, step, site, index) so a forward pass can be
//! replayed bit-exactly.

/// splitmix64 finalizer; good avalanche, stable across platforms.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a submodule seed from the global seed and a purpose label.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose bytes, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in purpose.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(seed ^ h)
}

/// Counter-based uniform value in [0, 1), keyed on (seed, step, site, index).
#[inline]
pub fn counter_uniform(seed: u64, step: u64, site: u64, index: u64) -> f64 {
    let z = mix64(seed ^ mix64(step ^ mix64(site ^ mix64(index))));
    // 53 high bits -> [0, 1)
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Stable site identifier for a dropout location.
pub fn dropout_site(label: &str, ordinal: u64) -> u64 {
    derive_seed(ordinal, label)
}
