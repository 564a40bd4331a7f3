use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::rng::rng_from_seed;

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, fan-in being every axis but the last.
    UniformFanIn,
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Deterministic initialisation: identical `(shape, scheme, seed)` gives a
/// bit-identical tensor.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = match scheme {
        InitScheme::Zeros => alloc::vec![0.0; n],
        InitScheme::Ones => alloc::vec![1.0; n],
        InitScheme::UniformFanIn => {
            let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
            let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        InitScheme::Normal { std } => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect(),
    };
    Tensor::new(shape, data).expect("init length matches shape")
}
