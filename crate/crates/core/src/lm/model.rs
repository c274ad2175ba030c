//! Pre-norm causal transformer with learned positions and a tied output head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};

pub const LM_PREFIX: &str = "lm/";
pub const TOK_EMBED: &str = "lm/tok_embed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Longest prefix-plus-token sequence.
    pub max_len: usize,
}

impl LmConfig {
    pub fn desk(vocab: usize) -> Self {
        LmConfig { vocab, d_lm: 64, layers: 2, heads: 4, mlp_dim: 256, max_len: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide d_lm={}", self.heads, self.d_lm)));
        }
        if self.vocab < 2 || self.layers == 0 || self.max_len == 0 {
            return Err(Error::config("language model needs a vocabulary, layers and positions"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, m) = (self.d_lm, self.mlp_dim);
        let block = 4 * d + 4 * (d * d + d) + d * m + m + m * d + d;
        self.vocab * d + self.max_len * d + self.layers * block + 2 * d
    }
}

pub fn init_lm<R: Rng>(store: &mut ParamStore, cfg: &LmConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    const STD: f64 = 0.02;
    let d = cfg.d_lm;
    store.normal(TOK_EMBED, &[cfg.vocab, d], STD, rng);
    store.normal("lm/pos_embed", &[cfg.max_len, d], STD, rng);
    for i in 0..cfg.layers {
        let p = format!("lm/blocks.{i}");
        store.layer_norm(&format!("{p}.ln1"), d);
        store.attention(&format!("{p}.attn"), d, d, STD, rng);
        store.layer_norm(&format!("{p}.ln2"), d);
        store.linear(&format!("{p}.mlp.lin1"), d, cfg.mlp_dim, STD, rng);
        store.linear(&format!("{p}.mlp.lin2"), cfg.mlp_dim, d, STD / (2.0 * cfg.layers as f64).sqrt(), rng);
    }
    store.layer_norm("lm/ln_f", d);
    Ok(())
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = -1e9;
        }
    }
    m
}

/// Logits `k × V` for the `k` token positions, each predicting the next
/// token. Prefix rows occupy the leading positions and emit no logits.
pub fn lm_forward(sess: &mut Session, cfg: &LmConfig, prefix: Option<Var>, ids: &[u32]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::contract("language model needs at least the BOS token"));
    }
    let r = prefix.map_or(0, |p| sess.tape.shape(p)[0]);
    let n = r + ids.len();
    if n > cfg.max_len {
        return Err(Error::contract(format!("sequence of {n} positions exceeds max length {}", cfg.max_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let table = sess.param(TOK_EMBED)?;
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let tok = sess.tape.gather_rows(table, &idx)?;
    let mut x = match prefix {
        Some(p) => sess.tape.concat_rows(&[p, tok])?,
        None => tok,
    };
    let pos_table = sess.param("lm/pos_embed")?;
    let pos = sess.tape.slice_rows(pos_table, 0, n)?;
    x = sess.tape.add(x, pos)?;
    let mask = sess.tape.constant(causal_mask(n));
    for i in 0..cfg.layers {
        let p = format!("lm/blocks.{i}");
        let h = sess.layer_norm(&format!("{p}.ln1"), x)?;
        let a = sess.attention(&format!("{p}.attn"), h, h, h, cfg.heads, Some(mask))?;
        x = sess.tape.add(x, a)?;
        let h = sess.layer_norm(&format!("{p}.ln2"), x)?;
        let h = sess.linear(&format!("{p}.mlp.lin1"), h)?;
        let h = sess.tape.gelu(h)?;
        let h = sess.linear(&format!("{p}.mlp.lin2"), h)?;
        x = sess.tape.add(x, h)?;
    }
    let x = sess.layer_norm("lm/ln_f", x)?;
    let x = if r > 0 { sess.tape.slice_rows(x, r, ids.len())? } else { x };
    sess.tape.matmul_t(x, table)
}
