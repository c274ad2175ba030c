//! Optional mask-reconstruction pre-fit of the SAM-side modules.
//!
//! The encoder, prompt encoder and SAM stage start from seeded random
//! weights. With `steps > 0` they are first fitted to predict each region's
//! coarse mask from its box prompt, then frozen as usual. The Fourier
//! matrix keeps its random draw.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::pretrain::mean_of;
use crate::model::Model;
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{schedule, AdamConfig, AdamState};
use crate::params::Session;
use crate::prompt::{Prompt, PE_GAUSSIAN};
use crate::scenegen::RegionSample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefitConfig {
    /// Zero disables the pre-fit.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        PrefitConfig { steps: 0, batch: 4, lr: 1e-3, seed: 0 }
    }
}

impl PrefitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("prefit batch must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("prefit lr {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Parameters the pre-fit may move.
pub fn prefit_names(model: &Model) -> BTreeSet<String> {
    model
        .store
        .names()
        .filter(|n| n.starts_with("encoder/") || n.starts_with("prompt/") || n.starts_with(crate::mixer::SAM_PREFIX))
        .filter(|n| n.as_str() != PE_GAUSSIAN)
        .cloned()
        .collect()
}

/// Fraction of each `grid × grid` cell covered by the mask, as
/// `[1 - t, t]` rows.
pub fn cell_targets(mask: &Tensor, grid: usize) -> Result<Tensor> {
    let n = mask.shape()[0];
    if mask.shape() != [n, n] || grid == 0 || n % grid != 0 {
        return Err(Error::contract(format!("mask {:?} does not tile a {grid}×{grid} grid", mask.shape())));
    }
    let c = n / grid;
    let mut rows = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut s = 0.0;
            for y in gy * c..(gy + 1) * c {
                for x in gx * c..(gx + 1) * c {
                    s += mask.data()[y * n + x];
                }
            }
            let t = s / (c * c) as f64;
            rows.push(vec![1.0 - t, t]);
        }
    }
    Tensor::from_rows(&rows)
}

/// Mean per-cell binary cross-entropy of `logits` (`G×G`) against soft
/// targets, written as a two-way softmax over `[0, z]`.
pub fn mask_bce(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let cells = targets.shape()[0];
    let z = tape.reshape(logits, &[cells, 1])?;
    let zero = tape.constant(Tensor::zeros(&[cells, 1]));
    let two = tape.concat_cols(&[zero, z])?;
    let lp = tape.log_softmax(two)?;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / cells as f64)
}

/// Runs the pre-fit in place and returns the per-step losses.
pub fn prefit_sam_side(model: &mut Model, samples: &[RegionSample], cfg: &PrefitConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::config("prefit needs at least one region"));
    }
    let names = prefit_names(model);
    let grid = model.config.encoder.grid();
    let adam_cfg = AdamConfig::default();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&RegionSample> = (0..cfg.batch).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let (value, mut grads) = {
            let mut sess = Session::new(&model.store, &names);
            let mut terms = Vec::with_capacity(batch.len());
            for s in &batch {
                let (_, logits) = model.frozen_path(&mut sess, &s.image, &Prompt::Box(s.bbox))?;
                terms.push(mask_bce(&mut sess.tape, logits, &cell_targets(&s.mask, grid)?)?);
            }
            let loss = mean_of(&mut sess.tape, &terms)?;
            let value = sess.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training { step, message: format!("prefit loss {value}") });
            }
            sess.tape.backward(loss)?;
            (value, sess.grads())
        };
        grads.retain(|n, _| names.contains(n));
        let lr = cfg.lr * schedule(step, cfg.steps);
        adam.update(&adam_cfg, &mut model.store, &grads, |_| lr)?;
        if step % 100 == 0 {
            log::debug!("prefit step {step}: mask loss {value:.4}");
        }
        losses.push(value);
    }
    Ok(losses)
}
