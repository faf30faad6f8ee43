//! Decoupled-weight-decay Adam with inspectable state, so checkpoints can
//! resume bit-exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_steps: 50,
        }
    }
}

pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { params, m, v, step: 0, cfg })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn current_lr(&self) -> f64 {
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((self.step + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update from `grads`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        let mut gs = Vec::with_capacity(self.params.len());
        for (_, p) in &self.params {
            let g = match grads.get(p) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm {norm}")));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let g = (&gs[i] * scale)?;
            let m = ((&self.m[i] * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            let v = ((&self.v[i] * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            // Decay only matrices; biases and norm gains are left alone.
            let decayed = if p.rank() >= 2 && self.cfg.weight_decay > 0.0 {
                (p.as_tensor() * (1.0 - lr * self.cfg.weight_decay))?
            } else {
                p.as_tensor().clone()
            };
            p.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    /// Moment buffers keyed `m.<name>` / `v.<name>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let fetch = |key: String| -> Result<Tensor> {
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::State(format!("optimizer state missing {key}")))?;
                Ok(t.to_dtype(p.dtype())?)
            };
            self.m[i] = fetch(format!("m.{name}"))?;
            self.v[i] = fetch(format!("v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}
