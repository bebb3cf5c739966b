//! Deterministic seed derivation.
//!
//! All stochastic code in this crate draws from ChaCha8 streams whose seeds
//! are derived from a base seed and a stream counter. Parallel loops hand each
//! item its own counter, so results do not depend on scheduling or worker
//! count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `(base, stream)`.
///
/// Distinct `(base, stream)` pairs map to distinct outputs with overwhelming
/// probability; the map is pure, so any worker may derive any stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x51ed_270b_a6ae_9cd5)))
}

/// ChaCha8 stream for `(base, stream)`.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
