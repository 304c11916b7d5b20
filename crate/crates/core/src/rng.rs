//! Named random streams derived from one run seed.
//!
//! Each feature draws from its own ChaCha stream, so toggling one feature
//! never shifts the numbers another feature sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const BATCHING: &str = "batching";
pub const NEGATIVES: &str = "negatives";
pub const INTERP: &str = "interp";
pub const INIT: &str = "init";
pub const SPLIT: &str = "split";
pub const PROPOSALS: &str = "proposals";
pub const TOY: &str = "toy";

/// Deterministic stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Sub-stream for an indexed item (e.g. one optimizer trajectory).
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
