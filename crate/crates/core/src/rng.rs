//! Counter-based random streams.
//!
//! Every random draw is addressed by `(master seed, stream, a, b)`, e.g.
//! `(seed, Stream::Extend, step, particle)`, so results do not depend on the
//! order or thread in which draws are made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named sub-streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelSampling = 1,
    Extend = 2,
    Resample = 3,
    Ctl = 4,
    Baselines = 5,
    Rejection = 6,
    Init = 7,
    Dataset = 8,
    Eval = 9,
    Mle = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed; used to give each run or generation its own seed.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ splitmix64(index.wrapping_add(0x51)))
}

/// An RNG for the counter `(seed, stream, a, b)`.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let words = [
        splitmix64(seed),
        splitmix64(seed ^ (stream as u64).rotate_left(17)),
        splitmix64(a ^ 0x6a09_e667_f3bc_c908),
        splitmix64(b ^ 0xbb67_ae85_84ca_a73b),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
