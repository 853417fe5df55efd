//! Deterministic RNG streams. One master seed per experiment; every consumer
//! derives its own stream from (master, label), so adding or removing one
//! consumer never shifts the draws seen by another.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; fixed here so derived seeds never change across
/// dependency upgrades.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a textual label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mix with the master through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

/// A ChaCha stream seeded from (master, label).
pub fn substream(master: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, label))
}
