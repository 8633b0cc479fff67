//! AdamW with decoupled weight decay and an optional cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to zero over the total number of steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate for zero-based `step` out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = step.saturating_sub(self.warmup_steps) as f64 / span;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        };
        self.lr * warm * decay
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub state: AdamState,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, decay_mask: Vec<bool>) -> Result<Self> {
        config.validate()?;
        let n = decay_mask.len();
        Ok(Self {
            config,
            state: AdamState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            decay_mask,
        })
    }

    pub fn with_state(config: OptimizerConfig, decay_mask: Vec<bool>, state: AdamState) -> Result<Self> {
        config.validate()?;
        if state.m.len() != decay_mask.len() || state.v.len() != decay_mask.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        Ok(Self {
            config,
            state,
            decay_mask,
        })
    }

    /// Applies one update with learning rate `lr`. Returns the gradient norm
    /// before clipping.
    pub fn step<F: Real>(&mut self, params: &mut [F], grads: &[F], lr: f64) -> Result<f64> {
        let n = self.decay_mask.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::ShapeMismatch("parameter and gradient lengths must match the optimizer".into()));
        }
        let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = &self.config;
        let scale = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..n {
            let g = grads[i].f64() * scale;
            let m = c.beta1 * self.state.m[i] as f64 + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.state.v[i] as f64 + (1.0 - c.beta2) * g * g;
            self.state.m[i] = m as f32;
            self.state.v[i] = v as f32;
            let mut p = params[i].f64();
            if self.decay_mask[i] {
                p -= lr * c.weight_decay * p;
            }
            p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            params[i] = F::of(p);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, vec![false; 3]).unwrap();
        let mut p = vec![1.0f64, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -4.0, 0.0], 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decay_only_touches_masked_entries() {
        let mut opt = AdamW::new(OptimizerConfig::default(), vec![true, false]).unwrap();
        let mut p = vec![1.0f64, 1.0];
        opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 5e-2)).abs() < 1e-12);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, vec![false; 2]).unwrap();
        let mut p = vec![3.0f64, -1.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn rejects_nonfinite_gradients_and_bad_config() {
        let mut opt = AdamW::new(OptimizerConfig::default(), vec![false]).unwrap();
        assert!(opt.step(&mut [1.0f64], &[f64::NAN], 0.1).is_err());
        let bad = OptimizerConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(AdamW::new(bad, vec![]).is_err());
    }

    #[test]
    fn schedules() {
        let c = OptimizerConfig {
            lr: 1.0,
            schedule: Schedule::Cosine,
            ..Default::default()
        };
        assert!((c.lr_at(0, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(50, 100) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(100, 100).abs() < 1e-12);
        let w = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        assert!((w.lr_at(0, 10) - 0.25).abs() < 1e-12);
        assert_eq!(w.lr_at(7, 10), 1.0);
    }
}
