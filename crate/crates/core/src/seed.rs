//! Independent labeled RNG streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_NOISE: &str = "noise";
pub const STREAM_SHUFFLE: &str = "shuffle";
pub const STREAM_REINIT: &str = "reinit";
pub const STREAM_AUGMENT: &str = "augment";
pub const STREAM_SPLIT: &str = "split";
pub const STREAM_DATA: &str = "data";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `label` under `master`.
pub fn stream_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label.as_bytes())))
}

pub fn stream(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(stream_seed(master, label))
}

/// Stream for a numbered sub-task, e.g. the reinit draw of round `index`.
pub fn substream(master: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(stream_seed(master, label) ^ splitmix64(index.wrapping_add(1))))
}
