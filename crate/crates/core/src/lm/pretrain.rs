//! Pretraining of the frozen language model on grammar sentences.
//!
//! The model sees a prefix of `task_len + content_len` rows before BOS. The
//! task rows carry a learned signature telling labels from captions. With
//! probability `cond_prob` the content rows hold noisy copies of the
//! sentence's content-word embeddings in order; otherwise they are zero, so
//! the model also learns the unconditional grammar. Region features later
//! reach the model through the same prefix slots.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lm::loss::caption_loss;
use crate::lm::model::{init_lm, lm_forward, LmConfig, LM_PREFIX, TOK_EMBED};
use crate::lm::vocab::{BOS, EOS};
use crate::numerics::{Tensor, Var};
use crate::optim::{schedule, AdamConfig, AdamState};
use crate::params::{ParamStore, Session};
use crate::scenegen::TargetKind;

const SIGNATURE: &str = "lm_pretrain/task";

#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    /// Sentence words without BOS/EOS.
    pub words: Vec<u32>,
    pub task: TargetKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub ppl_threshold: f64,
    pub cond_prob: f64,
    /// Noise on content rows relative to the embedding RMS.
    pub content_noise: f64,
    pub eval_every: usize,
    pub early_stop: bool,
    pub task_len: usize,
    pub content_len: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            ppl_threshold: 1.5,
            cond_prob: 0.5,
            content_noise: 0.3,
            eval_every: 100,
            early_stop: false,
            task_len: 6,
            content_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub steps_run: usize,
    /// Held-out perplexity with content rows filled in.
    pub conditional_ppl: f64,
    /// Held-out perplexity with empty content rows.
    pub unconditional_ppl: f64,
    pub curve: Vec<(usize, f64)>,
}

fn task_row(task: TargetKind) -> usize {
    match task {
        TargetKind::Label => 0,
        TargetKind::Caption => 1,
    }
}

/// Content words of a sentence in order, truncated to `limit`.
pub fn content_words(words: &[u32], stopwords: &BTreeSet<u32>, limit: usize) -> Vec<u32> {
    words.iter().copied().filter(|w| !stopwords.contains(w)).take(limit).collect()
}

struct Prefixer<'c> {
    cfg: &'c LmPretrainConfig,
    d: usize,
    stopwords: &'c BTreeSet<u32>,
}

impl Prefixer<'_> {
    fn build(&self, sess: &mut Session, ex: &LmExample, conditional: bool, noise: Option<(&mut ChaCha8Rng, f64)>) -> Result<Var> {
        let sig = sess.param(SIGNATURE)?;
        let sig = sess.tape.slice_rows(sig, task_row(ex.task) * self.cfg.task_len, self.cfg.task_len)?;
        let n = self.cfg.content_len;
        let content = if conditional {
            let ids: Vec<usize> = content_words(&ex.words, self.stopwords, n).iter().map(|&w| w as usize).collect();
            let mut parts = Vec::new();
            if !ids.is_empty() {
                let table = sess.param(TOK_EMBED)?;
                let mut rows = sess.tape.gather_rows(table, &ids)?;
                if let Some((rng, std)) = noise {
                    let dist = Normal::new(0.0, std.max(1e-12)).map_err(|e| Error::config(e.to_string()))?;
                    let z: Vec<f64> = (0..ids.len() * self.d).map(|_| dist.sample(rng)).collect();
                    let z = sess.tape.constant(Tensor::new(vec![ids.len(), self.d], z)?);
                    rows = sess.tape.add(rows, z)?;
                }
                parts.push(rows);
            }
            if ids.len() < n {
                parts.push(sess.tape.constant(Tensor::zeros(&[n - ids.len(), self.d])));
            }
            sess.tape.concat_rows(&parts)?
        } else {
            sess.tape.constant(Tensor::zeros(&[n, self.d]))
        };
        sess.tape.concat_rows(&[sig, content])
    }
}

pub(crate) fn mean_of(tape: &mut crate::numerics::Tape, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.scale(total, 1.0 / losses.len() as f64)
}

fn io(words: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = vec![BOS];
    input.extend_from_slice(words);
    let mut target = words.to_vec();
    target.push(EOS);
    (input, target)
}

fn embed_rms(store: &ParamStore) -> Result<f64> {
    let t = store.get(TOK_EMBED)?;
    Ok((t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt())
}

fn heldout_ppl(store: &ParamStore, cfg: &LmConfig, pre: &Prefixer, heldout: &[LmExample], conditional: bool) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in heldout {
        let mut sess = Session::inference(store);
        let prefix = pre.build(&mut sess, ex, conditional, None)?;
        let (input, target) = io(&ex.words);
        let logits = lm_forward(&mut sess, cfg, Some(prefix), &input)?;
        let logp = sess.tape.log_softmax(logits)?;
        let lp = sess.tape.value(logp);
        for (i, &t) in target.iter().enumerate() {
            nll -= lp.data()[i * cfg.vocab + t as usize];
            count += 1;
        }
    }
    Ok((nll / count.max(1) as f64).exp())
}

/// Trains a fresh language model; returns only the `lm/` parameters.
pub fn pretrain_lm(
    cfg: &LmConfig,
    pc: &LmPretrainConfig,
    train: &[LmExample],
    heldout: &[LmExample],
    stopwords: &BTreeSet<u32>,
) -> Result<(ParamStore, LmReport)> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::config("language-model pretraining needs train and held-out sentences"));
    }
    if pc.task_len + pc.content_len + 1 + train.iter().map(|e| e.words.len()).max().unwrap_or(0) > cfg.max_len {
        return Err(Error::config("prefix plus longest sentence exceeds the model's max length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut store = ParamStore::new();
    init_lm(&mut store, cfg, &mut rng)?;
    store.normal(SIGNATURE, &[2 * pc.task_len, cfg.d_lm], 0.02, &mut rng);
    let trainable: BTreeSet<String> = store.names().cloned().collect();
    let pre = Prefixer { cfg: pc, d: cfg.d_lm, stopwords };
    let adam = AdamConfig::default();
    let mut state = AdamState::default();
    let mut curve = Vec::new();
    let mut steps_run = 0;
    let mut converged = false;
    for step in 0..pc.steps {
        let noise_std = pc.content_noise * embed_rms(&store)?;
        let grads = {
            let mut sess = Session::new(&store, &trainable);
            let mut losses = Vec::with_capacity(pc.batch);
            for _ in 0..pc.batch {
                let ex = &train[rng.random_range(0..train.len())];
                let conditional = rng.random::<f64>() < pc.cond_prob;
                let prefix = pre.build(&mut sess, ex, conditional, Some((&mut rng, noise_std)))?;
                let (input, target) = io(&ex.words);
                let logits = lm_forward(&mut sess, cfg, Some(prefix), &input)?;
                losses.push(caption_loss(&mut sess.tape, logits, &target, 0.0)?);
            }
            let loss = mean_of(&mut sess.tape, &losses)?;
            let value = sess.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training { step, message: format!("language-model loss {value}") });
            }
            sess.tape.backward(loss)?;
            sess.grads()
        };
        let lr = pc.lr * schedule(step, pc.steps);
        state.update(&adam, &mut store, &grads, |_| lr)?;
        steps_run = step + 1;
        if pc.eval_every > 0 && (steps_run % pc.eval_every == 0 || steps_run == pc.steps) {
            let ppl = heldout_ppl(&store, cfg, &pre, heldout, true)?;
            log::debug!("lm pretrain step {steps_run}: held-out ppl {ppl:.4}");
            curve.push((steps_run, ppl));
            if ppl < pc.ppl_threshold {
                converged = true;
                if pc.early_stop {
                    break;
                }
            }
        }
    }
    let conditional_ppl = heldout_ppl(&store, cfg, &pre, heldout, true)?;
    let unconditional_ppl = heldout_ppl(&store, cfg, &pre, heldout, false)?;
    if !converged && conditional_ppl >= pc.ppl_threshold {
        return Err(Error::Training {
            step: steps_run,
            message: format!(
                "held-out perplexity {conditional_ppl:.4} did not reach {} (curve {curve:?})",
                pc.ppl_threshold
            ),
        });
    }
    let mut lm = ParamStore::new();
    for (name, value) in store.iter() {
        if name.starts_with(LM_PREFIX) {
            lm.insert(name.clone(), value.clone());
        }
    }
    Ok((lm, LmReport { steps_run, conditional_ppl, unconditional_ppl, curve }))
}
