//! SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Tensor};

/// Velocity state for SGD: `v ← momentum·v + grad + weight_decay·param`,
/// `param ← param − lr·v`. One velocity buffer per registered parameter.
pub struct SgdOptimizer {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocities: Vec<(String, Vec<f32>)>,
}

impl SgdOptimizer {
    pub fn new(
        lr: f32,
        momentum: f32,
        weight_decay: f32,
        params: &[(&str, &Tensor)],
    ) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Param(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!("momentum must be in [0,1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Param(format!("weight_decay must be ≥ 0, got {weight_decay}")));
        }
        let velocities = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0f32; t.len()]))
            .collect();
        Ok(Self { lr, momentum, weight_decay, velocities })
    }

    /// Applies one step to every `(name, tensor)` pair using `grads`.
    /// Parameters without a velocity buffer are a state error.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &Gradients,
    ) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::State(format!("no gradient for parameter {name}")))?;
            let vel = self
                .velocities
                .iter_mut()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::State(format!("no velocity buffer for parameter {name}")))?;
            if vel.len() != tensor.len() || grad.len() != tensor.len() {
                return Err(Error::State(format!(
                    "buffer extents for {name} disagree: param {}, grad {}, velocity {}",
                    tensor.len(),
                    grad.len(),
                    vel.len()
                )));
            }
            let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((p, v), &g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    /// Gradients of ones (via loss = sum(p)) or zeros (loss detached).
    fn unit_grads(name: &str, len: usize, ones: bool) -> Gradients {
        let mut tape = Tape::new();
        let t = Tensor::zeros(vec![len]).with_grad();
        let v = tape.param(name, &t).unwrap();
        let loss = if ones {
            crate::nn::ops::sum(&mut tape, v)
        } else {
            let c = tape.input(vec![1], vec![0.0]);
            crate::nn::ops::sum(&mut tape, c)
        };
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_grad_zero_wd_is_identity() {
        let mut p = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap().with_grad();
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0, &[("p", &p)]).unwrap();
        let grads = unit_grads("p", 2, false);
        opt.step(&mut [("p", &mut p)], &grads).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.0, &[("p", &p)]).unwrap();
        let grads = unit_grads("p", 1, true);
        opt.step(&mut [("p", &mut p)], &grads).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = 1, p1 = −1; v2 = 0.9 + 1 = 1.9, p2 = −2.9.
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap().with_grad();
        let mut opt = SgdOptimizer::new(1.0, 0.9, 0.0, &[("p", &p)]).unwrap();
        for _ in 0..2 {
            let grads = unit_grads("p", 1, true);
            opt.step(&mut [("p", &mut p)], &grads).unwrap();
        }
        assert!((p.data()[0] - (-2.9)).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn missing_velocity_is_state_error() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap().with_grad();
        let q = Tensor::new(vec![1], vec![0.0]).unwrap().with_grad();
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0, &[("q", &q)]).unwrap();
        let grads = unit_grads("p", 1, true);
        let err = opt.step(&mut [("p", &mut p)], &grads).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn lr_zero_rejected() {
        let p = Tensor::new(vec![1], vec![0.0]).unwrap().with_grad();
        assert!(SgdOptimizer::new(0.0, 0.9, 0.0, &[("p", &p)]).is_err());
    }
}
