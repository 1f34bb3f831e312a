#![allow(dead_code)]

use crpl::prompt::PromptBank;
use crpl::synthetic::{generate_with_retry, Benchmark, SyntheticSpec};
use crpl::training::TrainConfig;

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        k: 4,
        d: 8,
        n_sources: 2,
        samples_per_domain: 40,
        domain_rotation_deg: 20.0,
        noise_sigma: 0.6,
        seed,
        d_tok: 8,
        d_hid: 16,
        ..SyntheticSpec::default()
    }
}

pub fn small_bench(seed: u64) -> Benchmark {
    generate_with_retry(&small_spec(seed), 4).expect("small benchmark").0
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        m1: 2,
        m2: 2,
        batch_size: 8,
        epochs: 3,
        lr: 0.001,
        seed,
        ..TrainConfig::default()
    }
}

/// Flat list of learnable parameters.
pub fn flat_params(bank: &PromptBank) -> Vec<f64> {
    bank.learnable_blocks().concat()
}

/// (block, index) of the `n`-th learnable coordinate.
pub fn locate(bank: &PromptBank, mut n: usize) -> (usize, usize) {
    for (b, block) in bank.learnable_blocks().iter().enumerate() {
        if n < block.len() {
            return (b, n);
        }
        n -= block.len();
    }
    panic!("coordinate out of range");
}

pub fn perturbed(bank: &PromptBank, block: usize, idx: usize, h: f64) -> PromptBank {
    let mut b = bank.clone();
    b.learnable_blocks_mut()[block][idx] += h;
    b
}

/// |a - f| / max(|a|, |f|, floor).
pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}
