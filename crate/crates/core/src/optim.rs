//! AdamW with linear warm-up, cosine decay and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::model::ParamStore;
use crate::scalar::Scalar;

fn default_betas() -> (f64, f64) {
    (0.9, 0.98)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_min_ratio() -> f64 {
    0.1
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Length of the cosine horizon; defaults to the stage's step count.
    #[serde(default)]
    pub total_steps: Option<usize>,
    #[serde(default = "default_min_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: None,
            min_lr_ratio: default_min_ratio(),
            grad_clip: default_clip(),
        }
    }
}

/// Learning rate as a function of the 0-based step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Accumulated gradients by parameter name, kept in 64-bit.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Adds `scale ×` the gradients reached on `g` into `acc`.
pub fn accumulate<T: Scalar>(acc: &mut Grads, g: &Graph<T>, vars: &BTreeMap<String, Var>, scale: f64) {
    for (name, &v) in vars {
        if let Some(grad) = g.grad(v) {
            let dst = acc.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (d, &x) in dst.iter_mut().zip(grad) {
                *d += scale * x.as_f64();
            }
        }
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub struct AdamW {
    pub cfg: OptimConfig,
    pub schedule: LrSchedule,
    m: Grads,
    v: Grads,
    t: usize,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, steps: usize) -> Self {
        let schedule = LrSchedule {
            peak: cfg.lr,
            warmup: cfg.warmup_steps,
            total: cfg.total_steps.unwrap_or(steps),
            min_ratio: cfg.min_lr_ratio,
        };
        Self {
            cfg,
            schedule,
            m: Grads::new(),
            v: Grads::new(),
            t: 0,
        }
    }

    /// Applies one update for every parameter present in `grads`; returns
    /// the pre-clipping global gradient norm.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &Grads) -> f64 {
        let norm = global_norm(grads);
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let lr = self.schedule.lr(self.t);
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + self.cfg.eps);
                let mut x = w.as_f64();
                x -= lr * (upd + self.cfg.weight_decay * x);
                *w = T::lit(x);
            }
        }
        norm
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 4,
            total: 14,
            min_ratio: 0.1,
        };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert!((s.lr(4) - 1.0).abs() < 1e-12);
        assert!((s.lr(9) - 0.55).abs() < 1e-12);
        assert!((s.lr(14) - 0.1).abs() < 1e-12);
        assert!((s.lr(100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p: ParamStore<f64> = BTreeMap::from([("w".into(), Tensor::new([2], vec![1.0, -1.0]).unwrap())]);
        let mut opt = AdamW::new(OptimConfig::with_lr(0.01), 10);
        let g = Grads::from([("w".into(), vec![0.3, -0.2])]);
        opt.step(&mut p, &g);
        let d = p["w"].data();
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm_and_absent_params_stay() {
        let mut p: ParamStore<f64> = BTreeMap::from([
            ("a".into(), Tensor::new([1], vec![0.0]).unwrap()),
            ("frozen".into(), Tensor::new([1], vec![5.0]).unwrap()),
        ]);
        let mut opt = AdamW::new(OptimConfig::with_lr(0.1), 10);
        let g = Grads::from([("a".into(), vec![100.0])]);
        assert_eq!(opt.step(&mut p, &g), 100.0);
        assert_eq!(p["frozen"].data(), &[5.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p: ParamStore<f64> = BTreeMap::from([("x".into(), Tensor::new([1], vec![3.0]).unwrap())]);
        let mut opt = AdamW::new(OptimConfig::with_lr(0.1), 300);
        for _ in 0..300 {
            let x = p["x"].data()[0];
            opt.step(&mut p, &Grads::from([("x".into(), vec![2.0 * x])]));
        }
        assert!(p["x"].data()[0].abs() < 1e-2);
    }
}
