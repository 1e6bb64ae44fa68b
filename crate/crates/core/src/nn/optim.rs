//! SGD with momentum and L2 weight decay, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine annealing from `lr` to 0 over the whole run.
    Cosine { lr: f64 },
    /// Multiply by `gamma` every `every` epochs.
    Step { lr: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::Cosine { lr } | LrSchedule::Step { lr, .. } => lr,
        }
    }

    /// Same shape, different peak rate.
    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            LrSchedule::Constant { .. } => LrSchedule::Constant { lr },
            LrSchedule::Cosine { .. } => LrSchedule::Cosine { lr },
            LrSchedule::Step { gamma, every, .. } => LrSchedule::Step { lr, gamma, every },
        }
    }

    /// Rate for `step` out of `total_steps`, where `epoch` is the current epoch.
    pub fn lr_at(&self, step: usize, total_steps: usize, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr } => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Step { lr, gamma, every } => lr * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: vec![0.0; param_count],
        }
    }

    /// `v ← μv + (g + λθ)`, `θ ← θ − η v`. `lr` may be negative for ascent.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        let lr = lr as f32;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= lr * *v;
        }
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { lr: 0.1 };
        assert!((s.lr_at(0, 100, 0) - 0.1).abs() < 1e-12);
        assert!(s.lr_at(100, 100, 9).abs() < 1e-12);
        let st = LrSchedule::Step { lr: 1.0, gamma: 0.5, every: 2 };
        assert_eq!(st.lr_at(0, 1, 3), 0.5);
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Sgd::new(2, 0.0, 0.0);
        let mut p = vec![1.0f32, -1.0];
        opt.step(&mut p, &[0.5, -0.5], 0.1);
        assert_eq!(p, vec![0.95, -0.95]);
    }
}
