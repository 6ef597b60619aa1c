use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Constant for `warm_epochs` epochs, then halved every `halve_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub warm_epochs: usize,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs || self.halve_every == 0 {
            return self.base;
        }
        let halvings = (epoch - self.warm_epochs) / self.halve_every;
        self.base * 0.5f64.powi(halvings as i32)
    }
}

/// AdamW with decoupled weight decay over a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(DecodeError::invalid(format!(
                "optimizer tracks {} buffers, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != p.len() {
                return Err(DecodeError::Shape {
                    op: "optimizer_step",
                    lhs: (1, self.first[k].len()),
                    rhs: (p.len(), g.len()),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.lr * c.weight_decay * p[i];
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut [&mut p[..]], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![0.0];
        opt.step(&mut [&mut p[..]], &[vec![1.0]]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![2.0];
        opt.step(&mut [&mut p[..]], &[vec![0.0]]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn halving_schedule() {
        let s = LrSchedule {
            base: 1.0,
            warm_epochs: 20,
            halve_every: 2,
        };
        assert_eq!(s.lr(19), 1.0);
        assert_eq!(s.lr(22), 0.5);
        assert_eq!(s.lr(24), 0.25);
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(opt.step(&mut [&mut p[..]], &[vec![0.0; 3]]).is_err());
    }
}
