//! Seed derivation.
//!
//! Every random quantity in a run is drawn from its own ChaCha stream, keyed by
//! the experiment seed, a purpose tag, the round and the client. Streams never
//! share state, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Geometry = 1,
    Channel = 2,
    Partition = 3,
    Minibatch = 4,
    ClientSubset = 5,
    ModelInit = 6,
    Synthetic = 7,
    Estimation = 8,
}

/// Returns the generator for `(seed, purpose, round, client)`.
pub fn stream(seed: u64, purpose: Purpose, round: u64, client: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 8 bits purpose | 32 bits round | 24 bits client
    let id = ((purpose as u64) << 56) | ((round & 0xFFFF_FFFF) << 24) | (client & 0x00FF_FFFF);
    rng.set_stream(id);
    rng
}
