use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};

/// Projection weights of one multi-head attention layer. Weights are stored
/// `in × out` so a layer is `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product attention.
///
/// Queries, keys and values are projected to the internal width, split into
/// `heads` column blocks, attended with scale `1/sqrt(d_internal/heads)`,
/// concatenated and projected back. `mask`, when given, is added to every
/// head's `q × k` logit matrix.
pub fn mha(
    tape: &mut Tape,
    w: &AttentionWeights,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d_internal = tape.shape(w.q_w)[1];
    if heads == 0 || d_internal % heads != 0 {
        return Err(Error::config(format!(
            "internal width {d_internal} is not divisible by {heads} heads"
        )));
    }
    if tape.shape(keys)[0] != tape.shape(values)[0] {
        return Err(Error::Dimension {
            op: "mha",
            lhs: tape.shape(keys).to_vec(),
            rhs: tape.shape(values).to_vec(),
        });
    }
    let q = linear(tape, queries, w.q_w, w.q_b)?;
    let k = linear(tape, keys, w.k_w, w.k_b)?;
    let v = linear(tape, values, w.v_w, w.v_b)?;
    let head_dim = d_internal / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let logits = tape.matmul_t(qh, kh)?;
        let mut logits = tape.scale(logits, scale)?;
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let attn = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, joined, w.out_w, w.out_b)
}
