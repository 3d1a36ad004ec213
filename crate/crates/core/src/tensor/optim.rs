use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{EscError, Result};

/// Constant learning rate for `warm_epochs`, exponential decay afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub warm_epochs: usize,
    pub decay_rate: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            warm_epochs: 10,
            decay_rate: 0.94,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(EscError::Config(format!(
                "invalid schedule: lr {} decay {}",
                self.initial_lr, self.decay_rate
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs {
            self.initial_lr
        } else {
            let decayed = (epoch + 1 - self.warm_epochs) as i32;
            self.initial_lr * self.decay_rate.powi(decayed)
        }
    }
}

/// Classical momentum SGD: `v <- m*v + g; p <- p - lr*v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f32,
    pub learning_rate: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(param_sizes: impl IntoIterator<Item = usize>, momentum: f32, learning_rate: f32) -> Self {
        Self {
            momentum,
            learning_rate,
            velocity: param_sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `grads[i]` must be present for every parameter.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Vec<f32>>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(EscError::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut self.velocity).enumerate() {
            let g = g.as_ref().ok_or(EscError::MissingGradient(i))?;
            if g.len() != p.numel() || v.len() != p.numel() {
                return Err(EscError::Shape(format!("gradient {i} has wrong length")));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(1.5);
        let mut opt = OptimizerState::new([1], 0.9, 0.1);
        opt.step(&mut p, &[Some(vec![0.0])]).unwrap();
        assert_eq!(p[0].data(), &[1.5]);
    }

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let mut p = one(1.0);
        let mut opt = OptimizerState::new([1], 0.0, 0.25);
        opt.step(&mut p, &[Some(vec![2.0])]).unwrap();
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn two_momentum_steps_follow_recurrence() {
        // scripted recurrence in f64: v1 = 1, p1 = 0.9; v2 = 1.9, p2 = 0.71
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            v = 0.9 * v + 1.0;
            p -= 0.1 * v;
        }
        assert!((p - 0.71).abs() < 1e-12);

        let mut params = one(1.0);
        let mut opt = OptimizerState::new([1], 0.9, 0.1);
        for _ in 0..2 {
            opt.step(&mut params, &[Some(vec![1.0])]).unwrap();
        }
        assert!((params[0].data()[0] as f64 - p).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one(1.0);
        let mut opt = OptimizerState::new([1], 0.9, 0.1);
        assert!(matches!(opt.step(&mut p, &[None]), Err(EscError::MissingGradient(0))));
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(9), 0.01);
        assert!((s.lr_at(10) - 0.0094).abs() < 1e-15);
        assert!(s.lr_at(11) < s.lr_at(10));
        let flat = LrSchedule {
            decay_rate: 1.0,
            ..s
        };
        assert!((0..200).all(|e| flat.lr_at(e) == 0.01));
    }
}
