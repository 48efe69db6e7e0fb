//! Master-seed splitting. Every random stage draws from its own stream,
//! derived from the master seed and a fixed stage label, so changing how
//! much randomness one stage consumes never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage labels used by the experiment pipeline.
pub mod stage {
    pub const INITIAL_CONDITIONS: &str = "initial-conditions";
    pub const SELECTION: &str = "selection";
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const EVAL: &str = "eval";
    pub const PREDICT: &str = "predict";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Seed for `label` under `master`.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

/// Seed for the `index`-th item of a stage (e.g. one sweep cell).
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(master, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
