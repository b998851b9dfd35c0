//! Deterministic RNG streams derived from one master seed.
//!
//! Every run takes a single `u64` master seed. Independent consumers get
//! independent ChaCha8 streams keyed by (master, stream, substream) packed
//! little-endian into the 32-byte seed. Changing the master seed changes
//! every stream; no stream ever shares state with another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization.
pub const STREAM_INIT: u64 = 1;
/// Per-epoch dataset shuffling.
pub const STREAM_SHUFFLE: u64 = 2;
/// Corruption mask placement.
pub const STREAM_CORRUPT: u64 = 3;
/// Conditional sampling (substream = image index).
pub const STREAM_SAMPLE: u64 = 4;

/// RNG for (master, stream), substream 0.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    substream_rng(master, stream, 0)
}

/// RNG for (master, stream, substream).
pub fn substream_rng(master: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&substream.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
