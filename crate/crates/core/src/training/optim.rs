use serde::{Deserialize, Serialize};

use crate::models::{ParamGroup, ParamSet};
use crate::numerics::Tensor;
use crate::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 0.5 }
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warm = ((self.warmup_frac * total as f64).ceil() as usize).max(1);
        if step < warm {
            return self.base_lr * (step + 1) as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam with persistent moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, m, v, t: vec![0; params.len()] }
    }

    /// Applies one update to the parameters whose group passes `trainable`.
    /// Updated parameters are rounded to `f32` so checkpoints are exact.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<StepInfo> {
        ensure!(grads.len() == params.len(), "expected {} gradients, got {}", params.len(), grads.len());
        let ids: Vec<_> = params.ids().filter(|&id| trainable(params.group(id))).collect();
        let mut sq = 0.0;
        for &id in &ids {
            sq += grads[id.index()].data().iter().map(|g| g * g).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {grad_norm}")));
        }
        let c = &self.config;
        let clipped = c.clip_norm > 0.0 && grad_norm > c.clip_norm;
        let factor = if clipped { c.clip_norm / grad_norm } else { 1.0 };
        for &id in &ids {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let g = grads[i].data();
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * factor;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
            params.get_mut(id).snap_to_f32();
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}
