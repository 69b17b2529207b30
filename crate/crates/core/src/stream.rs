//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream. Parallel work derives
//! one stream per work item from a root seed: the root seeds the ChaCha8 key
//! and the item index selects the ChaCha stream, so items never overlap and the
//! result does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream number `index` under `root`.
pub fn stream(root: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index);
    rng
}

/// Mixes a root seed with a tag so that independent purposes (init, shuffling,
/// masks, validation) never share a key.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = root ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
