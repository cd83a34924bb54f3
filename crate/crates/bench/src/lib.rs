//! Shared inputs for the benchmarks.

use dascd_core::data::{generate_pair, SyntheticConfig};
use dascd_core::train::Example;
use dascd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// One synthetic example at the default 32×32 toy size.
pub fn toy_example(seed: u64) -> Example {
    let s = generate_pair(&SyntheticConfig::default(), seed).expect("default generator");
    Example {
        pair: s.pair,
        label: s.label,
    }
}
