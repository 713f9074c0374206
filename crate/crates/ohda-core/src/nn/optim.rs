//! Adam over flat parameter vectors, plus the teacher EMA update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Inverse decay scale: step t uses lr / (1 + (t-1)/lr_decay_steps).
    /// 0 keeps the rate constant. Keyed to the optimizer's own step count,
    /// so a resumed or extended run follows the same curve as an unbroken
    /// one regardless of where stage boundaries fall.
    pub lr_decay_steps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay_steps: 0.0,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are serialized as f64 so a resumed
/// run replays the exact update sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_count: usize) -> Adam {
        Adam {
            cfg,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adam step".into(),
                expected: format!("{} parameters", self.m.len()),
                got: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        let lr = if self.cfg.lr_decay_steps > 0.0 {
            self.cfg.lr / (1.0 + (self.t - 1) as f64 / self.cfg.lr_decay_steps)
        } else {
            self.cfg.lr
        };
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}

/// In-place exponential moving average: `shadow = m * shadow + (1 - m) * current`.
pub fn ema_update(shadow: &mut [f64], current: &[f64], momentum: f64) {
    debug_assert_eq!(shadow.len(), current.len());
    for (s, c) in shadow.iter_mut().zip(current) {
        *s = momentum * *s + (1.0 - momentum) * c;
    }
}
