//! Counter-based seed splitting.
//!
//! Every random stream in the crate is derived from a root seed and a
//! stream tuple, never from global state. Two streams with different
//! tuples are independent ChaCha streams; the same tuple always replays.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream namespaces.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const SEGMENT: u64 = 5;
    pub const MAGNET: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const VALID: u64 = 8;
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns a generator for `(seed, namespace, counters...)`.
pub fn split(seed: u64, namespace: u64, counters: &[u64]) -> ChaCha8Rng {
    let mut key = mix(seed ^ mix(namespace.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    for &c in counters {
        key = mix(key ^ mix(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(namespace);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
