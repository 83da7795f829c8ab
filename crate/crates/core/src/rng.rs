//! Deterministic random streams.
//!
//! Every consumer of randomness derives its generator from a `(seed, index)`
//! pair. The pair is mixed into a ChaCha8 key and the index also selects the
//! ChaCha stream, so distinct indices never share a keystream and any stream
//! can be regenerated without touching the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of `(seed, index)` used as the stream key.
pub fn stream_key(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Generator for stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, index));
    rng.set_stream(index);
    rng
}

/// Sub-stream of a stream, e.g. one per stage of a replication.
pub fn substream(seed: u64, index: u64, lane: u64) -> StreamRng {
    stream(stream_key(seed, index), lane)
}
