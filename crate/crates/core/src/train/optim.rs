use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Vision setting: β = (0.9, 0.99).
    pub fn vision() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }

    /// Language setting: β2 = 0.95, ε = 1e-15.
    pub fn language() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-15,
            weight_decay: 0.1,
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::vision()
    }
}

/// Moments per parameter, laid out like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients in the store. Parameters without a
    /// gradient buffer are left alone; gains are never decayed.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let lr_t = T::from_f64_lossy(lr);
        let shrink = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let eps = T::from_f64_lossy(c.eps);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            let decay = p.decay && c.weight_decay != 0.0;
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                if decay {
                    *w = *w * shrink;
                }
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    /// Linear warmup from `lr_init` to `lr_peak`, then cosine to `lr_final`.
    WarmupCosine {
        warmup: usize,
        total: usize,
        lr_init: f64,
        lr_peak: f64,
        lr_final: f64,
    },
    /// Linear warmup, constant `lr_peak`, then a linear decay to
    /// `final_ratio · lr_peak` over the last `decay_fraction` of training.
    WarmupStableDecay {
        warmup: usize,
        total: usize,
        lr_init: f64,
        lr_peak: f64,
        decay_fraction: f64,
        final_ratio: f64,
    },
    Constant {
        total: usize,
        lr: f64,
    },
}

impl Schedule {
    pub fn warmup_cosine(warmup: usize, total: usize, lr_peak: f64) -> Self {
        Schedule::WarmupCosine {
            warmup,
            total,
            lr_init: 1e-7,
            lr_peak,
            lr_final: 1e-6,
        }
    }

    pub fn warmup_stable_decay(warmup: usize, total: usize, lr_peak: f64) -> Self {
        Schedule::WarmupStableDecay {
            warmup,
            total,
            lr_init: 1e-7,
            lr_peak,
            decay_fraction: 0.2,
            final_ratio: 0.1,
        }
    }

    pub fn total(&self) -> usize {
        match *self {
            Schedule::WarmupCosine { total, .. }
            | Schedule::WarmupStableDecay { total, .. }
            | Schedule::Constant { total, .. } => total,
        }
    }

    /// Same shape stretched or shrunk to a new total, warmup kept.
    pub fn with_total(mut self, new_total: usize) -> Self {
        match &mut self {
            Schedule::WarmupCosine { total, warmup, .. } | Schedule::WarmupStableDecay { total, warmup, .. } => {
                *total = new_total;
                *warmup = (*warmup).min(new_total);
            }
            Schedule::Constant { total, .. } => *total = new_total,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::WarmupCosine { warmup, total, .. } | Schedule::WarmupStableDecay { warmup, total, .. }
                if warmup > total =>
            {
                Err(DnaError::config("schedule.warmup", format!("warmup {warmup} exceeds total {total}")))
            }
            Schedule::WarmupStableDecay { decay_fraction, .. } if !(0.0..=1.0).contains(&decay_fraction) => {
                Err(DnaError::config("schedule.decay_fraction", "must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Learning rate at step `t ∈ [0, total]`.
pub fn schedule_lr(sched: &Schedule, t: usize) -> Result<f64> {
    let total = sched.total();
    if t > total {
        return Err(DnaError::config("step", format!("step {t} is outside 0..={total}")));
    }
    let warm = |lr_init: f64, lr_peak: f64, warmup: usize| lr_init + (lr_peak - lr_init) * t as f64 / warmup as f64;
    Ok(match *sched {
        Schedule::Constant { lr, .. } => lr,
        Schedule::WarmupCosine {
            warmup,
            total,
            lr_init,
            lr_peak,
            lr_final,
        } => {
            if t < warmup {
                warm(lr_init, lr_peak, warmup)
            } else if total == warmup {
                lr_peak
            } else {
                let p = (t - warmup) as f64 / (total - warmup) as f64;
                lr_final + (lr_peak - lr_final) * 0.5 * (1.0 + (PI * p).cos())
            }
        }
        Schedule::WarmupStableDecay {
            warmup,
            total,
            lr_init,
            lr_peak,
            decay_fraction,
            final_ratio,
        } => {
            // The decay never eats into the warmup.
            let decay_len = (decay_fraction * total as f64).round() as usize;
            let decay_start = (total - decay_len.min(total)).max(warmup);
            let decay_len = total - decay_start;
            if t < warmup {
                warm(lr_init, lr_peak, warmup)
            } else if t <= decay_start || decay_len == 0 {
                lr_peak
            } else {
                let p = (t - decay_start) as f64 / decay_len as f64;
                lr_peak * (1.0 - (1.0 - final_ratio) * p)
            }
        }
    })
}
