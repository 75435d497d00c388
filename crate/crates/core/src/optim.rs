//! Adam with exponential step decay and global-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `base_lr * decay^(floor(step / steps_per_decay))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialDecay {
    pub base_lr: f64,
    pub decay: f64,
    pub steps_per_decay: usize,
}

impl ExponentialDecay {
    pub fn lr(&self, step: usize) -> f64 {
        let k = step / self.steps_per_decay.max(1);
        self.base_lr * self.decay.powi(k as i32)
    }
}

pub fn global_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grad` so its norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..5000 {
            let g = vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            opt.step(&mut x, &g, 1e-2);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut x = vec![0.0];
        Adam::new(1).step(&mut x, &[123.0], 0.1);
        assert!((x[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn schedule_and_clipping() {
        let s = ExponentialDecay {
            base_lr: 1e-4,
            decay: 0.955,
            steps_per_decay: 40_000,
        };
        assert_eq!(s.lr(39_999), 1e-4);
        assert!((s.lr(80_000) - 1e-4 * 0.955 * 0.955).abs() < 1e-18);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.25), 5.0);
        assert!((global_norm(&g) - 0.25).abs() < 1e-15);
        let mut small = vec![0.1, 0.0];
        clip_grad_norm(&mut small, 0.25);
        assert_eq!(small, vec![0.1, 0.0]);
    }
}
