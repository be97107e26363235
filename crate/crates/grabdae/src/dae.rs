//! Denoising auto-encoder over feature vectors.
//!
//! A feature row is corrupted by adding Gaussian noise to a ratio-controlled
//! subset of its components, encoded through a single ReLU bottleneck and
//! decoded back with an identity-activated affine map. The corruption draw
//! is treated as data: gradients pass through it unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{ops, uniform_param, Tape, Tensor, Var};

/// Encoder θ = {W, b} and decoder θ' = {W', b'} with a bottleneck h ≤ d.
#[derive(Debug, Clone)]
pub struct DaeParams {
    pub enc_w: Tensor, // [d×h]
    pub enc_b: Tensor, // [h]
    pub dec_w: Tensor, // [h×d]
    pub dec_b: Tensor, // [d]
}

impl DaeParams {
    pub fn init(feature_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if hidden_dim == 0 || hidden_dim > feature_dim {
            return Err(Error::Param(format!(
                "bottleneck must satisfy 1 ≤ h ≤ d, got h={hidden_dim}, d={feature_dim}"
            )));
        }
        let bound = crate::nn::glorot_bound(feature_dim, hidden_dim, 1.0);
        Ok(Self {
            enc_w: uniform_param(vec![feature_dim, hidden_dim], bound, rng),
            enc_b: Tensor::zeros(vec![hidden_dim]).with_grad(),
            dec_w: uniform_param(vec![hidden_dim, feature_dim], bound, rng),
            dec_b: Tensor::zeros(vec![feature_dim]).with_grad(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_w.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_w.shape()[1]
    }
}

/// Corruption ratio range and noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub v_min: f32,
    pub v_max: f32,
    pub noise_sigma: f32,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.v_min)
            || !(0.0..=1.0).contains(&self.v_max)
            || self.v_min > self.v_max
        {
            return Err(Error::Param(format!(
                "corruption ratio range must satisfy 0 ≤ v_min ≤ v_max ≤ 1, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if self.noise_sigma <= 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Param(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Per row: draw v ~ U(v_min, v_max), pick ⌊v·d⌋ distinct components and add
/// N(0, σ²) to each; the rest are copied bit-identically.
pub fn corrupt(tape: &mut Tape, x: Var, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Result<Var> {
    spec.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("corrupt expects [N×d] features, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    let mut scratch: Vec<usize> = (0..d).collect();
    for row in 0..n {
        let v = rng.random_range(spec.v_min..=spec.v_max);
        let m = (v * d as f32).floor() as usize;
        // partial Fisher-Yates for m distinct components
        for i in 0..m {
            let j = rng.random_range(i..d);
            scratch.swap(i, j);
        }
        for &comp in &scratch[..m] {
            let noise: f32 = rng.sample::<f32, _>(StandardNormal) * spec.noise_sigma;
            idx.push(row * d + comp);
            vals.push(noise);
        }
        scratch.sort_unstable(); // reset for the next row
    }
    ops::add_sparse(tape, x, &idx, &vals)
}

/// y = ReLU(W·x̃ + b); gradients flow into θ.
pub fn encode(tape: &mut Tape, x_tilde: Var, enc_w: Var, enc_b: Var) -> Result<Var> {
    let pre = ops::linear(tape, x_tilde, enc_w, enc_b)?;
    Ok(ops::relu(tape, pre))
}

/// z = W'·y + b' (identity output activation).
pub fn decode(tape: &mut Tape, y: Var, dec_w: Var, dec_b: Var) -> Result<Var> {
    ops::linear(tape, y, dec_w, dec_b)
}

/// Mean squared error between the clean features and the reconstruction.
pub fn reconstruction_loss(tape: &mut Tape, x_clean: Var, z: Var) -> Result<Var> {
    ops::mse_loss(tape, x_clean, z)
}
