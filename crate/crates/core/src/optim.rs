//! AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

impl AdamState {
    /// Applies one update. Each gradient's key picks its learning rate
    /// through `lr_of`; a rate of exactly zero leaves the parameter
    /// unchanged while its moments still advance.
    pub fn update<F>(&mut self, cfg: &AdamConfig, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr_of: F) -> Result<()>
    where
        F: Fn(&str) -> f64,
    {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let lr = lr_of(name);
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension { op: "adamw", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let x = p.data()[i];
                let step = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + wd * x;
                p.data_mut()[i] = x - lr * step;
            }
        }
        Ok(())
    }
}

/// Multiplier on the base rate: linear warmup over the first 5% of steps,
/// then cosine decay to zero.
pub fn schedule(step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * 0.05).ceil().max(1.0) as usize;
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
