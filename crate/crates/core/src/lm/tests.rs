use std::collections::BTreeSet;

use super::*;
use crate::numerics::Tensor;
use crate::params::{ParamStore, Session};
use crate::testutil::rng;

fn tiny(vocab: usize, seed: u64) -> (ParamStore, LmConfig) {
    let cfg = LmConfig { vocab, d_lm: 16, layers: 2, heads: 2, mlp_dim: 32, max_len: 24 };
    let mut store = ParamStore::new();
    init_lm(&mut store, &cfg, &mut rng(seed)).unwrap();
    // sharpen the random model so decoding choices are not near-ties
    let emb = store.get_mut(TOK_EMBED).unwrap();
    emb.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    (store, cfg)
}

fn logits_of(store: &ParamStore, cfg: &LmConfig, prefix: Option<&Tensor>, ids: &[u32]) -> Tensor {
    let mut s = Session::inference(store);
    let p = prefix.map(|t| s.tape.constant(t.clone()));
    let l = lm_forward(&mut s, cfg, p, ids).unwrap();
    s.tape.value(l).clone()
}

#[test]
fn causality_is_exact() {
    let (store, cfg) = tiny(9, 0);
    let prefix = Tensor::randn(&[3, 16], 1.0, &mut rng(1));
    let ids = [1, 4, 5, 6, 7, 8];
    let base = logits_of(&store, &cfg, Some(&prefix), &ids);
    assert_eq!(base.shape(), &[6, 9]);
    for k in 1..ids.len() {
        let mut other = ids;
        other[k] = if ids[k] == 3 { 4 } else { 3 };
        let changed = logits_of(&store, &cfg, Some(&prefix), &other);
        for row in 0..k {
            assert_eq!(base.row(row), changed.row(row), "position {k} leaked into row {row}");
        }
        assert_ne!(base.row(k), changed.row(k));
    }
}

#[test]
fn bos_only_gives_one_row_and_length_is_checked() {
    let (store, cfg) = tiny(9, 0);
    assert_eq!(logits_of(&store, &cfg, None, &[1]).shape(), &[1, 9]);
    let mut s = Session::inference(&store);
    let p = s.tape.constant(Tensor::zeros(&[20, 16]));
    assert!(lm_forward(&mut s, &cfg, Some(p), &[1, 2, 3, 4, 5]).is_err());
    assert!(lm_forward(&mut s, &cfg, None, &[]).is_err());
}

#[test]
fn frozen_lm_passes_gradient_to_prefix_only() {
    let (store, cfg) = tiny(9, 2);
    let none = BTreeSet::new();
    let mut s = Session::new(&store, &none);
    let p = s.tape.leaf(Tensor::randn(&[4, 16], 1.0, &mut rng(3)), true);
    let logits = lm_forward(&mut s, &cfg, Some(p), &[1, 5, 6]).unwrap();
    let loss = caption_loss(&mut s.tape, logits, &[5, 6, 2], 0.1).unwrap();
    s.tape.backward(loss).unwrap();
    let g = s.tape.grad(p).unwrap();
    assert!(g.data().iter().any(|v| *v != 0.0));
    assert!(s.grads().values().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn uniform_logits_give_log_v() {
    for eps in [0.0, 0.1, 0.5] {
        let mut t = crate::numerics::Tape::new();
        let z = t.constant(Tensor::zeros(&[4, 7]));
        let l = caption_loss(&mut t, z, &[4, 5, 6, 2], eps).unwrap();
        assert!((t.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn confident_correct_logits_approach_zero() {
    let mut t = crate::numerics::Tape::new();
    let mut z = Tensor::zeros(&[3, 6]);
    for (i, tok) in [4usize, 5, 2].iter().enumerate() {
        z.data_mut()[i * 6 + tok] = 1e4;
    }
    let z = t.constant(z);
    let l = caption_loss(&mut t, z, &[4, 5, 2], 0.0).unwrap();
    assert!(t.value(l).data()[0] < 1e-12);
}

#[test]
fn smoothed_loss_matches_direct_arithmetic() {
    let v = 5;
    let z = Tensor::randn(&[3, v], 2.0, &mut rng(4));
    let targets = [4u32, 3, 2];
    let eps = 0.1;
    let mut expect = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (j, &x) in row.iter().enumerate() {
            let q = if j == t as usize { 1.0 - eps + eps / v as f64 } else { eps / v as f64 };
            expect -= q * (x - lse);
        }
    }
    expect /= 3.0;
    let mut tape = crate::numerics::Tape::new();
    let zv = tape.constant(z);
    let l = caption_loss(&mut tape, zv, &targets, eps).unwrap();
    assert!((tape.value(l).data()[0] - expect).abs() < 1e-10);
}

fn smoothed_row_loss(row: &[f64], target: usize, eps: f64) -> f64 {
    let v = row.len() as f64;
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter()
        .enumerate()
        .map(|(j, &x)| -(if j == target { 1.0 - eps + eps / v } else { eps / v }) * (x - lse))
        .sum()
}

#[test]
fn loss_decomposes_and_skips_padding() {
    let z = Tensor::randn(&[4, 6], 1.0, &mut rng(5));
    let mut tape = crate::numerics::Tape::new();
    let zv = tape.constant(z.clone());
    let full = caption_loss(&mut tape, zv, &[4, 5, 2, 0], 0.1).unwrap();
    let per: f64 = [4usize, 5, 2].iter().enumerate().map(|(i, &t)| smoothed_row_loss(z.row(i), t, 0.1)).sum();
    assert!((tape.value(full).data()[0] - per / 3.0).abs() < 1e-12);
    let zv = tape.constant(z);
    assert!(caption_loss(&mut tape, zv, &[4, 5, 2], 0.1).is_err());
    let zv = tape.constant(Tensor::zeros(&[2, 6]));
    assert!(caption_loss(&mut tape, zv, &[4, 5], 0.1).is_err());
}

fn scorer<'a>(store: &'a ParamStore, cfg: &'a LmConfig) -> impl FnMut(&[u32]) -> crate::Result<Vec<f64>> + 'a {
    move |ctx: &[u32]| {
        let mut s = Session::inference(store);
        let l = lm_forward(&mut s, cfg, None, ctx)?;
        let lp = s.tape.log_softmax(l)?;
        Ok(s.tape.value(lp).row(ctx.len() - 1).to_vec())
    }
}

fn exhaustive(score: &mut dyn FnMut(&[u32]) -> crate::Result<Vec<f64>>, v: u32, eos: u32, max_len: usize) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![Hypothesis { tokens: vec![], log_prob: 0.0 }];
    while let Some(h) = stack.pop() {
        let mut ctx = vec![1];
        ctx.extend_from_slice(&h.tokens);
        let lp = score(&ctx).unwrap();
        for t in 0..v {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            let c = Hypothesis { tokens, log_prob: h.log_prob + lp[t as usize] };
            if t == eos || c.tokens.len() == max_len {
                if best.as_ref().is_none_or(|b| c.score(true) > b.score(true)) {
                    best = Some(c);
                }
            } else {
                stack.push(c);
            }
        }
    }
    best.unwrap()
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    for seed in 0..10 {
        let (store, cfg) = tiny(3, 100 + seed);
        let bc = BeamConfig { beam: 81, max_len: 4, length_norm: true, eos: 2, banned: vec![] };
        let got = beam_search(scorer(&store, &cfg), 1, &bc).unwrap();
        let want = exhaustive(&mut scorer(&store, &cfg), 3, 2, 4);
        assert_eq!(got.tokens, want.tokens, "seed {seed}");
    }
}

#[test]
fn beam_one_is_greedy_and_search_is_deterministic() {
    for seed in 0..10 {
        let (store, cfg) = tiny(8, 200 + seed);
        let bc = BeamConfig { beam: 1, max_len: 6, length_norm: true, eos: 2, banned: vec![0, 1, 3] };
        let b = beam_search(scorer(&store, &cfg), 1, &bc).unwrap();
        let g = greedy(scorer(&store, &cfg), 1, &bc).unwrap();
        assert_eq!(b.tokens, g);
        assert!(b.tokens.iter().all(|t| ![0, 1, 3].contains(t)));
        let b3 = BeamConfig { beam: 3, ..bc.clone() };
        assert_eq!(beam_search(scorer(&store, &cfg), 1, &b3).unwrap(), beam_search(scorer(&store, &cfg), 1, &b3).unwrap());
    }
    let bc = BeamConfig { beam: 0, max_len: 3, length_norm: true, eos: 2, banned: vec![] };
    assert!(beam_search(|_| Ok(vec![0.0; 3]), 1, &bc).is_err());
}

#[test]
fn param_count_matches_store() {
    let (store, cfg) = tiny(11, 0);
    assert_eq!(store.count_scalars(LM_PREFIX), cfg.param_count());
}
