use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Most tokens generated after the start token.
    pub max_len: usize,
    pub length_norm: bool,
    pub eos: u32,
    /// Tokens never emitted.
    pub banned: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including a final EOS when one was emitted.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / self.tokens.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Beam search over `next_log_probs(context)`, where the context is `start`
/// followed by the hypothesis tokens. Each step keeps the `beam` best
/// unfinished extensions; an EOS extension ranked within the top `beam`
/// retires, as does anything reaching `max_len`. The search stops when
/// nothing is alive, or when `beam` hypotheses have retired and no live one
/// currently scores above the `beam`-th best of them. Returns the best
/// retired hypothesis.
pub fn beam_search<F>(mut next_log_probs: F, start: u32, cfg: &BeamConfig) -> Result<Hypothesis>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if cfg.beam == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut context = Vec::new();
    while !alive.is_empty() {
        let mut cands = Vec::new();
        for h in &alive {
            context.clear();
            context.push(start);
            context.extend_from_slice(&h.tokens);
            let lp = next_log_probs(&context)?;
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as u32;
                if cfg.banned.contains(&tok) || l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push(Hypothesis { tokens, log_prob: h.log_prob + l });
            }
        }
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        alive.clear();
        for (rank, c) in cands.into_iter().enumerate() {
            if *c.tokens.last().unwrap() == cfg.eos {
                if rank < cfg.beam {
                    finished.push(c);
                }
            } else if c.tokens.len() >= cfg.max_len {
                finished.push(c);
            } else {
                alive.push(c);
            }
            if alive.len() == cfg.beam {
                break;
            }
        }
        if finished.len() >= cfg.beam {
            let mut scores: Vec<f64> = finished.iter().map(|h| h.score(cfg.length_norm)).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let bar = scores[cfg.beam - 1];
            if alive.iter().all(|h| h.score(cfg.length_norm) <= bar) {
                break;
            }
        }
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.score(cfg.length_norm) > best.score(cfg.length_norm) { h } else { best })
        .ok_or_else(|| Error::Generation("beam search produced no hypothesis".into()))
}

/// Argmax decoding.
pub fn greedy<F>(mut next_log_probs: F, start: u32, cfg: &BeamConfig) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut ctx = vec![start];
    while ctx.len() - 1 < cfg.max_len {
        let lp = next_log_probs(&ctx)?;
        let best = (0..lp.len() as u32)
            .filter(|t| !cfg.banned.contains(t))
            .max_by(|&a, &b| lp[a as usize].total_cmp(&lp[b as usize]).then(b.cmp(&a)))
            .ok_or_else(|| Error::Generation("every token is banned".into()))?;
        ctx.push(best);
        if best == cfg.eos {
            break;
        }
    }
    Ok(ctx[1..].to_vec())
}
