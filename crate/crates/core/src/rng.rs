//! Seeded random number generation. Every random draw in the crate goes
//! through [`seeded`] so a single 64-bit seed pins a whole run.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type Rng = Pcg64;

pub fn seeded(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose, e.g. per-site
/// adapter initialization.
pub fn substream(seed: u64, label: &str) -> Rng {
    // FNV-1a over the label, mixed into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Pcg64::seed_from_u64(seed ^ h.rotate_left(17))
}
