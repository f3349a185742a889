//! Named random substreams.
//!
//! Every source of randomness in a run is derived from the single run seed
//! plus a stream tag, so changing how one component consumes randomness never
//! shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    TestSplit = 2,
    InitPrimary = 3,
    PrimarySampling = 5,
    AuxiliarySampling = 6,
    Mixing = 7,
    DiiBatches = 8,
}

/// Generator for `stream`, sub-indexed by `index` (e.g. an instance id).
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) ^ index);
    rng
}
