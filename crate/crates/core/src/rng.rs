//! Seed derivation.
//!
//! Every random stream in the crate comes from one 64-bit master seed and a
//! stream label: `derive_seed(master, label) = splitmix64(master ^ fnv1a64(label))`,
//! which seeds a ChaCha8 generator. Labels in use:
//!
//! - `init`: model parameter initialization
//! - `folds`, `holdout`: data splits
//! - `fold{k}/init`, `fold{k}/shuffle`: per-fold parameter init and batch order
//! - `synth/labels`, `synth/layout`, `synth/sample{i}`: synthetic data generation
//! - `perturb`, `gradcheck/input`: randomized parameters and inputs for checks

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label))
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
