//! Counter-based random substreams derived from one root seed.
//!
//! Every consumer draws from `ChaCha8(root_seed)` on its own stream number,
//! so adding or reordering consumers never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream numbers of the pipeline's random consumers.
pub mod streams {
    pub const SYNTH_DATA: u64 = 1;
    pub const SYNTH_MASK: u64 = 2;
    pub const SYNTH_TRUTH: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const INDUCING_INIT: u64 = 5;
    pub const MLP_INIT: u64 = 6;
    pub const MINIBATCH: u64 = 7;
    pub const VALIDATION_SUBSAMPLE: u64 = 8;
    pub const STABILITY_PROBES: u64 = 9;
    pub const BENCH_POINTS: u64 = 10;
    pub const MLE_STARTS: u64 = 11;
    pub const NUTS: u64 = 12;
    pub const OBSERVATION: u64 = 13;
    /// Streams at or above this value are reserved for indexed consumers such
    /// as additional chains.
    pub const INDEXED_BASE: u64 = 1 << 16;
}

pub fn substream(root_seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream);
    rng
}
