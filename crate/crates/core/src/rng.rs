//! Seed and stream derivation.
//!
//! Every random draw comes from a ChaCha20 generator keyed by
//! `derive_seed(seed, domain)` and positioned on ChaCha stream `stream`.
//! For process noise the stream of path `p`, coordinate `c` is
//! `p · 2²⁰ + c`, so any block of paths can be regenerated on its own and
//! yields exactly the values of a combined run.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Coordinates per path reserved in the noise stream numbering.
pub const MAX_COORDS: u64 = 1 << 20;

/// Independent purposes that draw randomness from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Noise = 0,
    InitialState = 1,
    StabilityProbe = 2,
    Regularity = 3,
    Auxiliary = 4,
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for `domain` derived from the experiment seed.
pub fn derive_seed(seed: u64, domain: Domain) -> u64 {
    splitmix64(seed ^ splitmix64(domain as u64 + 1))
}

/// Generator for one `(domain, stream)` pair.
pub fn stream_rng(seed: u64, domain: Domain, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(stream);
    rng
}

/// Stream id of noise coordinate `coord` on path `path`.
pub fn noise_stream(path: u64, coord: u64) -> u64 {
    debug_assert!(coord < MAX_COORDS);
    path * MAX_COORDS + coord
}
