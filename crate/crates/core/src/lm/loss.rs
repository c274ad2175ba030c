use crate::error::{Error, Result};
use crate::lm::vocab::{EOS, PAD};
use crate::numerics::{Tape, Tensor, Var};

/// Label-smoothed cross-entropy averaged over non-pad target positions.
/// Each row's target distribution puts `1 − ε + ε/V` on the gold token and
/// `ε/V` on every other token.
pub fn caption_loss(tape: &mut Tape, logits: Var, targets: &[u32], eps: f64) -> Result<Var> {
    let (k, v) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if targets.len() != k {
        return Err(Error::contract(format!("{} targets for {k} logit rows", targets.len())));
    }
    if !targets.iter().rev().find(|&&t| t != PAD).is_some_and(|&t| t == EOS) {
        return Err(Error::contract("targets must end with EOS"));
    }
    let live = targets.iter().filter(|&&t| t != PAD).count();
    let other = eps / v as f64;
    let gold = 1.0 - eps + other;
    let mut q = Tensor::zeros(&[k, v]);
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t as usize >= v {
            return Err(Error::contract(format!("target id {t} outside vocabulary of {v}")));
        }
        let row = &mut q.data_mut()[i * v..(i + 1) * v];
        row.fill(other);
        row[t as usize] = gold;
    }
    let logp = tape.log_softmax(logits)?;
    let q = tape.constant(q);
    let weighted = tape.mul(logp, q)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / live as f64)
}
