//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Consume one gradient and return the parameter delta.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::Shape(format!("gradient has {} entries, optimizer {}", grad.len(), self.m.len())));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                -lr * (*m / bc1) / ((*v / bc2).sqrt() + eps)
            })
            .collect())
    }
}

/// Base rate multiplied by `factor` once for every milestone epoch reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(2, AdamConfig::default());
        let d = a.step(&[3.0, -0.5], 0.01).unwrap();
        assert_abs_diff_eq!(d[0], -0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(d[1], 0.01, epsilon = 1e-9);
    }

    #[test]
    fn zero_lr_is_exact_noop() {
        let mut a = Adam::new(3, AdamConfig::default());
        assert!(a.step(&[1.0, 2.0, -3.0], 0.0).unwrap().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(1, AdamConfig::default());
        let mut x = 5.0;
        for _ in 0..3000 {
            x += a.step(&[2.0 * (x - 1.0)], 0.01).unwrap()[0];
        }
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn shape_checked() {
        assert!(matches!(Adam::new(2, AdamConfig::default()).step(&[1.0], 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = StepSchedule {
            base: 1e-3,
            milestones: vec![10, 20],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(9), 1e-3);
        assert_abs_diff_eq!(s.lr_at(10), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(25), 1e-5, epsilon = 1e-18);
    }
}
