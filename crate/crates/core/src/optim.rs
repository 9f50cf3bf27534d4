//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid AdamW hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter tensor plus the
/// count of applied and skipped steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
    pub skipped: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            steps: 0,
            skipped: 0,
        }
    }

    /// Applies one update in place. Returns `Ok(false)` and leaves every
    /// parameter and moment untouched when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            self.skipped += 1;
            log::warn!(
                "non-finite gradient, skipping step ({} skipped so far)",
                self.skipped
            );
            return Ok(false);
        }
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(true)
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup length is `round(warmup_frac · total_steps)`.
    pub fn new(peak: f64, warmup_frac: f64, total_steps: u64) -> Result<Self> {
        if !(peak > 0.0) || !(0.0..1.0).contains(&warmup_frac) || total_steps == 0 {
            return Err(Error::Config(format!(
                "lr schedule needs lr_peak > 0, 0 <= warmup_frac < 1, total_steps >= 1 (got {peak}, {warmup_frac}, {total_steps})"
            )));
        }
        let warmup_steps = (warmup_frac * total_steps as f64).round() as u64;
        Ok(Self {
            peak,
            warmup_steps,
            total_steps,
        })
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 0.03, 1000).unwrap();
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(30), 1e-3);
        assert!((s.at(15) - 5e-4).abs() < 1e-18);
        assert!(s.at(1000).abs() < 1e-18);
        assert!(s.at(5000).abs() < 1e-18);
        assert!((s.at(515) - 5e-4).abs() < 1e-15);
        for t in 30..1000 {
            assert!(s.at(t + 1) <= s.at(t));
        }
        assert!(LrSchedule::new(0.0, 0.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 1.0, 10).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        for _ in 0..10 {
            assert!(opt
                .step(&mut [&mut p], &[Tensor::zeros([3])], 1e-2)
                .unwrap());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_is_bounded_by_lr() {
        let lr = 1e-2;
        let mut p = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new([2], vec![3.0, -1e-3]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        for _ in 0..100 {
            let prev = p.clone();
            opt.step(&mut [&mut p], std::slice::from_ref(&g), lr).unwrap();
            for ((a, b), gi) in p.data().iter().zip(prev.data()).zip(g.data()) {
                let du = a - b;
                assert!(du.abs() <= lr * (1.0 + 1e-6));
                assert!(du * gi < 0.0);
            }
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2, minimum at 3.
        let mut p = Tensor::scalar(-2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        let sched = LrSchedule::new(0.5, 0.0, 500).unwrap();
        for t in 0..500 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            opt.step(&mut [&mut p], &[g], sched.at(t)).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-4, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        let bad = Tensor::new([2], vec![f64::NAN, 1.0]).unwrap();
        assert!(!opt.step(&mut [&mut p], &[bad], 1e-2).unwrap());
        assert_eq!(opt.skipped, 1);
        assert_eq!(opt.steps, 0);
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert!(opt.step(&mut [&mut p], &[Tensor::ones([2])], 1e-2).unwrap());
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::scalar(2.0);
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], 0.5)
            .unwrap();
        assert!((p.item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }
}
