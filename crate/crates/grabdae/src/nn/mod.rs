//! Minimal reverse-mode autodiff: tensors, the operation tape, layer ops,
//! and the SGD optimizer.

pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use optim::SgdOptimizer;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tensor with i.i.d. Uniform(−bound, bound) entries, marked trainable.
pub fn uniform_param(shape: Vec<usize>, bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent shape").with_grad()
}

/// Glorot-style bound √(6/(fan_in+fan_out)) times `scale`.
pub fn glorot_bound(fan_in: usize, fan_out: usize, scale: f32) -> f32 {
    scale * (6.0 / (fan_in + fan_out) as f32).sqrt()
}

/// He-style uniform bound √(6/fan_in), sized for ReLU layers.
pub fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}
