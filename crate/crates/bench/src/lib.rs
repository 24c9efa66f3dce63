//! Benchmark fixtures shared by the criterion targets.

use dynmoe::moe::{ExpertPool, MoeConfig, NullMass, Router};
use dynmoe::{Rng, Tensor};

/// A gate row of `e` probabilities drawn from a random softmax.
pub fn gate_row(e: usize, rng: &mut Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..e).map(|_| rng.normal() * 1.5).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// The fused-layer shape used by the full preset: 8 routed, 1 null, 1 shared.
pub fn desk_pool(d: usize, seed: u64) -> ExpertPool {
    let config = MoeConfig {
        n_routed: 8,
        n_null: 1,
        n_shared: 1,
        routed_hidden: 2 * d,
        shared_hidden: 4 * d,
        router: Router::TopP { p: 0.7 },
        null_mass: NullMass::Attenuate,
    };
    ExpertPool::init(config, d, 0.5, 0.1, &mut Rng::new(seed)).expect("valid pool")
}

pub fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], 1.0, &mut Rng::new(seed))
}
