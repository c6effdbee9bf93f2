//! Counter-based random streams.
//!
//! Every random draw in a run descends from one root seed. A stream is
//! addressed by `(root, domain, index)`: the root seed keys a ChaCha8
//! generator and `(domain, index)` selects its 64-bit stream id, so the
//! numbers a consumer sees never depend on how many draws another consumer
//! made or on which thread it ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const LLC: u64 = 3;
    pub const LLC_CHAIN: u64 = 4;
    pub const WALKER: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const VOLUME: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label. Used to hand a
/// sub-component (an SGLD call, a chain) its own root.
pub fn derive_seed(parent: u64, domain: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(domain.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ splitmix64(index)))
}

pub fn stream(root: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(derive_seed(0, domain, index));
    rng
}
