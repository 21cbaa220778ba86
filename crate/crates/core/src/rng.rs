//! Seeded random streams. Every consumer derives its own stream from the run
//! seed and a fixed stream id, so adding draws in one place never perturbs
//! another, and a resumed run can rebuild the stream for any epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate.
pub mod streams {
    pub const BEHAVIOR_INIT: u64 = 1;
    pub const BEHAVIOR_TRAIN: u64 = 2;
    pub const AGENT_INIT: u64 = 3;
    pub const POLICY_INIT: u64 = 4;
    pub const Q_INIT: u64 = 5;
    pub const EVAL_STATES: u64 = 6;
    pub const EVAL: u64 = 7;
    /// Evaluation rollouts after epoch `e` draw from stream `EVAL_BASE + e`.
    pub const EVAL_BASE: u64 = 1 << 21;
    /// Epoch `e` of training draws from stream `EPOCH_BASE + e`.
    pub const EPOCH_BASE: u64 = 1 << 20;
}
