//! One master seed, many named substreams.
//!
//! Every source of randomness in a run derives from the master seed plus a
//! stream name, so reruns with the same config reproduce bit-identical
//! results and adding draws to one stream never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream keyed by the master seed, selected by stream name.
pub fn substream(master_seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// The named streams a training run consumes.
pub struct TrainStreams {
    pub init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub prior: ChaCha8Rng,
    pub times: ChaCha8Rng,
    pub branch: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(master_seed: u64) -> Self {
        TrainStreams {
            init: substream(master_seed, "init"),
            data: substream(master_seed, "data"),
            prior: substream(master_seed, "prior"),
            times: substream(master_seed, "times"),
            branch: substream(master_seed, "branch"),
            dropout: substream(master_seed, "cfg-dropout"),
        }
    }
}
