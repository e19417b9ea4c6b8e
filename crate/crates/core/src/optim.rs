//! Adam over a fixed list of flat tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// State for tensors of the given lengths.
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every tensor in `params` with `grads`.
    pub fn update(&mut self, lr: f64, params: &mut [&mut Vec<f32>], grads: &[&Vec<f32>]) {
        assert_eq!(params.len(), self.m.len(), "tensor count changed");
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.cfg.eps as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() / c2s + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = vec![1.0f32, -2.0];
        let g = vec![0.5f32, -3.0];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        opt.update(0.1, &mut [&mut x], &[&g]);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0f32];
        let mut opt = Adam::new(AdamConfig::default(), &[1]);
        for _ in 0..2000 {
            let g = vec![2.0 * x[0]];
            opt.update(0.05, &mut [&mut x], &[&g]);
        }
        assert!(x[0].abs() < 1e-2);
    }
}
