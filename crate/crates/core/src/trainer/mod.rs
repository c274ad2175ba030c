//! Training loop for the trainable caption path: freezing policy, mixture
//! sampling, the pretrain and finetune phases, checkpoints and mixer
//! switching.

mod checkpoint;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};

use crate::error::{Error, Result};
use crate::lm::pretrain::mean_of;
use crate::lm::LM_PREFIX;
use crate::metrics::{evaluate, ScoreReport};
use crate::model::{is_frozen_component, is_switchable, FrozenFeatures, Model};
use crate::numerics::Tensor;
use crate::optim::{schedule, AdamConfig, AdamState};
use crate::params::{ParamStore, Session};
use crate::scenegen::grammar::Pos;
use crate::scenegen::{lsj_augment, RegionSample, TargetKind};

/// Learning rates above this are rejected outright.
pub const MAX_LR: f64 = 4e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mixer_lr: f64,
    pub lm_lr: f64,
    pub lr_ceiling: f64,
    pub batch: usize,
    pub steps_pretrain: usize,
    pub steps_finetune: usize,
    /// Draw weights of the detection and caption-free sources.
    pub ratio: (u32, u32),
    pub lsj: Option<(f64, f64)>,
    pub seed: u64,
    /// Validation-loss interval in steps; 0 disables it.
    pub eval_every: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mixer_lr: 1e-4,
            lm_lr: 0.0,
            lr_ceiling: MAX_LR,
            batch: 8,
            steps_pretrain: 2000,
            steps_finetune: 2000,
            ratio: (10, 1),
            lsj: None,
            seed: 0,
            eval_every: 100,
            beam: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lm_lr, self.mixer_lr, self.lr_ceiling];
        if lrs.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("learning rates must be finite"));
        }
        if self.lr_ceiling > MAX_LR {
            return Err(Error::config(format!("lr_ceiling {} exceeds the maximum {MAX_LR}", self.lr_ceiling)));
        }
        if !(0.0 <= self.lm_lr && self.lm_lr <= self.mixer_lr && self.mixer_lr <= self.lr_ceiling) {
            return Err(Error::config(format!(
                "need 0 <= lm_lr ({}) <= mixer_lr ({}) <= lr_ceiling ({})",
                self.lm_lr, self.mixer_lr, self.lr_ceiling
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.ratio.0 + self.ratio.1 == 0 {
            return Err(Error::config("sampling ratio needs a positive weight"));
        }
        if let Some((lo, hi)) = self.lsj {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("LSJ range ({lo}, {hi}) must satisfy 0 < min <= max")));
            }
        }
        if self.beam == 0 {
            return Err(Error::config("beam must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Splits the model's parameters. The language model joins the trainable
/// side only when its learning rate is positive.
pub fn freeze_policy(model: &Model, config: &TrainConfig) -> Partition {
    let mut p = Partition { trainable: BTreeSet::new(), frozen: BTreeSet::new() };
    for name in model.store.names() {
        let train_lm = config.lm_lr > 0.0 && name.starts_with(LM_PREFIX);
        if train_lm || !is_frozen_component(name) {
            p.trainable.insert(name.clone());
        } else {
            p.frozen.insert(name.clone());
        }
    }
    p
}

/// One weighted source of training regions.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub samples: &'a [RegionSample],
    pub kind: TargetKind,
    pub weight: u32,
}

/// Draws source indices in proportion to their weights.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    cumulative: Vec<u32>,
}

impl MixtureSampler {
    pub fn new(weights: &[u32]) -> Result<Self> {
        let mut acc = 0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect::<Vec<_>>();
        if acc == 0 {
            return Err(Error::config("mixture needs a positive weight"));
        }
        Ok(MixtureSampler { cumulative })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let r = rng.random_range(0..*self.cumulative.last().unwrap());
        self.cumulative.iter().position(|&c| r < c).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "caption",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Phase> {
        match tag {
            "pretrain" => Some(Phase::Pretrain),
            "caption" => Some(Phase::Finetune),
            _ => None,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 0x5052,
            Phase::Finetune => 0x4654,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Sum of |grad| over the frozen set; always exactly zero.
    pub frozen_grad_abs: f64,
}

/// Per-phase record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub losses: Vec<f64>,
    /// `(step, validation loss)` pairs.
    pub val_curve: Vec<(usize, f64)>,
    pub lsj_dropped: usize,
}

type CacheKey = (u64, usize, [u64; 4]);

fn cache_key(s: &RegionSample) -> CacheKey {
    let b = s.bbox;
    (s.scene_seed, s.object_index, [b.x0.to_bits(), b.y0.to_bits(), b.x1.to_bits(), b.y1.to_bits()])
}

/// Frozen-path outputs keyed by region, valid for one set of frozen
/// weights. Trainers sharing a world can hand it to each other.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    fingerprint: u64,
    regions: HashMap<CacheKey, Arc<FrozenFeatures>>,
    images: HashMap<u64, Arc<Tensor>>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    fn bind(&mut self, fingerprint: u64) {
        if self.fingerprint != fingerprint {
            self.regions.clear();
            self.images.clear();
            self.fingerprint = fingerprint;
        }
    }

    fn get(&mut self, model: &Model, s: &RegionSample) -> Result<Arc<FrozenFeatures>> {
        let key = cache_key(s);
        if let Some(f) = self.regions.get(&key) {
            return Ok(Arc::clone(f));
        }
        let img = match self.images.get(&s.scene_seed) {
            Some(i) => Arc::clone(i),
            None => {
                let i = model.image_features(&s.image)?;
                self.images.insert(s.scene_seed, Arc::clone(&i));
                i
            }
        };
        let f = Arc::new(model.region_features(&img, &model.prompt_for(s))?);
        self.regions.insert(key, Arc::clone(&f));
        Ok(f)
    }
}

/// Owns the model, the optimizer state and the position within a phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub partition: Partition,
    pub adam: AdamState,
    pub phase: Phase,
    /// Completed steps within `phase`.
    pub step: usize,
    pub adam_config: AdamConfig,
    cache: FeatureCache,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        let partition = freeze_policy(&model, &config);
        Ok(Trainer {
            model,
            config,
            partition,
            adam: AdamState::default(),
            phase,
            step: 0,
            adam_config: AdamConfig::default(),
            cache: FeatureCache::default(),
        })
    }

    /// Resumes from a checkpoint of the same phase, restoring the optimizer
    /// moments and step counter.
    pub fn resume(model: Model, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let phase = Phase::from_tag(&ckpt.tag)
            .ok_or_else(|| Error::config(format!("checkpoint tag `{}` names no training phase", ckpt.tag)))?;
        let mut t = Trainer::new(model, config, phase)?;
        if ckpt.frozen != t.partition.frozen {
            return Err(Error::config("checkpoint frozen set differs from this configuration's policy"));
        }
        t.adam = ckpt.adam.clone();
        t.step = ckpt.step as usize;
        Ok(t)
    }

    /// Switches to a new phase, keeping the weights and resetting the
    /// optimizer.
    pub fn start_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.step = 0;
        self.adam = AdamState::default();
    }

    fn features(&mut self, s: &RegionSample) -> Result<Arc<FrozenFeatures>> {
        if self.cache.fingerprint == 0 {
            self.cache.bind(self.model.frozen_fingerprint());
        }
        self.cache.get(&self.model, s)
    }

    /// Adopts a cache built by another trainer; it is emptied first if it
    /// belongs to different frozen weights.
    pub fn adopt_cache(&mut self, mut cache: FeatureCache) {
        cache.bind(self.model.frozen_fingerprint());
        self.cache = cache;
    }

    pub fn take_cache(&mut self) -> FeatureCache {
        std::mem::take(&mut self.cache)
    }

    fn lr_of(&self, name: &str, scale: f64) -> f64 {
        if name.starts_with(LM_PREFIX) {
            self.config.lm_lr * scale
        } else {
            self.config.mixer_lr * scale
        }
    }

    /// One forward, backward and update on `batch`. `augmented` samples
    /// run the frozen path on the tape instead of the cache.
    pub fn train_step(&mut self, batch: &[(RegionSample, TargetKind, bool)], lr_scale: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut feats = Vec::with_capacity(batch.len());
        for (s, _, fresh) in batch {
            feats.push(if *fresh { None } else { Some(self.features(s)?) });
        }
        let step = self.step;
        let phase = self.phase;
        let in_step = move |e: Error| match e {
            Error::NonFinite(op) => Error::Training {
                step,
                message: format!("non-finite value from `{op}` in the forward pass ({phase:?} phase)"),
            },
            other => other,
        };
        let (value, per_sample, mut grads) = {
            let mut sess = Session::new(&self.model.store, &self.partition.trainable);
            let mut losses = Vec::with_capacity(batch.len());
            for ((s, kind, _), f) in batch.iter().zip(&feats) {
                let prompt = self.model.prompt_for(s);
                let x = match f {
                    Some(f) => self.model.cached_inputs(&mut sess, f, &prompt),
                    None => self.model.frozen_path(&mut sess, &s.image, &prompt).map(|p| p.0),
                }
                .map_err(in_step)?;
                losses.push(self.model.loss(&mut sess, &x, &s.target(*kind)).map_err(in_step)?);
            }
            let per_sample: Vec<f64> = losses.iter().map(|&l| sess.tape.value(l).data()[0]).collect();
            let loss = mean_of(&mut sess.tape, &losses)?;
            let value = sess.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    message: format!("non-finite loss {value} ({:?} phase, per-sample {per_sample:?})", self.phase),
                });
            }
            sess.tape.backward(loss).map_err(in_step)?;
            (value, per_sample, sess.grads())
        };
        let mut frozen_grad_abs = 0.0;
        for (name, g) in &grads {
            if self.partition.frozen.contains(name) {
                frozen_grad_abs += g.data().iter().map(|v| v.abs()).sum::<f64>();
            } else if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training { step: self.step, message: format!("non-finite gradient for `{name}`") });
            }
        }
        if frozen_grad_abs != 0.0 {
            return Err(Error::Training {
                step: self.step,
                message: format!("frozen parameters received gradient {frozen_grad_abs}"),
            });
        }
        grads.retain(|n, _| self.partition.trainable.contains(n));
        let lrs: BTreeMap<String, f64> = grads.keys().map(|n| (n.clone(), self.lr_of(n, lr_scale))).collect();
        self.adam.update(&self.adam_config, &mut self.model.store, &grads, |n| lrs[n])?;
        log::trace!("step {} loss {value:.5} samples {per_sample:?}", self.step);
        Ok(StepStats { loss: value, frozen_grad_abs })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.phase.stream().rotate_left(48));
        r.set_stream(self.step as u64);
        r
    }

    /// Assembles the batch for the current step from `(seed, phase, step)`.
    /// With LSJ on, regions the jitter destroys are dropped and redrawn.
    pub fn draw_batch(&self, sources: &[Source]) -> Result<(Vec<(RegionSample, TargetKind, bool)>, usize)> {
        let sampler = MixtureSampler::new(&sources.iter().map(|s| s.weight).collect::<Vec<_>>())?;
        let mut rng = self.step_rng();
        let mut batch = Vec::with_capacity(self.config.batch);
        let mut dropped = 0;
        while batch.len() < self.config.batch {
            let src = &sources[sampler.draw(&mut rng)];
            let s = &src.samples[rng.random_range(0..src.samples.len())];
            match self.config.lsj {
                None => batch.push((s.clone(), src.kind, false)),
                Some((lo, hi)) => match lsj_augment(s, lo, hi, rng.random())? {
                    Some(a) => batch.push((a, src.kind, true)),
                    None => {
                        dropped += 1;
                        if dropped > 100 * self.config.batch {
                            return Err(Error::Training { step: self.step, message: "LSJ keeps destroying every region".into() });
                        }
                    }
                },
            }
        }
        Ok((batch, dropped))
    }

    /// Runs the current phase until `total` steps have completed.
    pub fn run(&mut self, sources: &[Source], total: usize, val: Option<(&[RegionSample], TargetKind)>) -> Result<RunLog> {
        for s in sources {
            if s.weight > 0 && s.samples.is_empty() {
                return Err(Error::config(format!("{:?} corpus is missing or empty", s.kind)));
            }
        }
        let mut log = RunLog::default();
        while self.step < total {
            let (batch, dropped) = self.draw_batch(sources)?;
            log.lsj_dropped += dropped;
            let stats = self.train_step(&batch, schedule(self.step, total))?;
            log.losses.push(stats.loss);
            self.step += 1;
            if let Some((v, kind)) = val {
                let every = self.config.eval_every;
                if every > 0 && (self.step % every == 0 || self.step == total) {
                    let l = self.val_loss(v, kind)?;
                    log::info!("{} step {}/{total}: train {:.4} val {l:.4}", self.phase.tag(), self.step, stats.loss);
                    log.val_curve.push((self.step, l));
                }
            }
        }
        Ok(log)
    }

    /// Weak-supervision phase: detection labels and label targets on the
    /// caption images, mixed at the configured ratio.
    pub fn run_pretrain(&mut self, detection: &[RegionSample], caption_free: &[RegionSample], val: &[RegionSample]) -> Result<RunLog> {
        if self.phase != Phase::Pretrain {
            self.start_phase(Phase::Pretrain);
        }
        if detection.is_empty() {
            return Err(Error::config("detection corpus is missing or empty"));
        }
        let (wd, wc) = self.config.ratio;
        let sources = [
            Source { samples: detection, kind: TargetKind::Label, weight: wd },
            Source { samples: caption_free, kind: TargetKind::Label, weight: if caption_free.is_empty() { 0 } else { wc } },
        ];
        let val = (!val.is_empty()).then_some((val, TargetKind::Label));
        self.run(&sources, self.config.steps_pretrain, val)
    }

    pub fn run_finetune(&mut self, captions: &[RegionSample], val: &[RegionSample]) -> Result<RunLog> {
        if self.phase != Phase::Finetune {
            self.start_phase(Phase::Finetune);
        }
        let sources = [Source { samples: captions, kind: TargetKind::Caption, weight: 1 }];
        let val = (!val.is_empty()).then_some((val, TargetKind::Caption));
        self.run(&sources, self.config.steps_finetune, val)
    }

    /// Mean teacher-forced loss over `samples`.
    pub fn val_loss(&mut self, samples: &[RegionSample], kind: TargetKind) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let f = self.features(s)?;
            let prompt = self.model.prompt_for(s);
            let mut sess = Session::inference(&self.model.store);
            let x = self.model.cached_inputs(&mut sess, &f, &prompt)?;
            let l = self.model.loss(&mut sess, &x, &s.target(kind))?;
            total += sess.tape.value(l).data()[0];
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Beam-decoded text for each sample.
    pub fn decode(&mut self, samples: &[RegionSample], beam: usize) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let f = self.features(s)?;
            let prompt = self.model.prompt_for(s);
            let ids = self.model.caption_from_features(&f, &prompt, beam)?;
            out.push(self.model.vocab.detokenize(&ids));
        }
        Ok(out)
    }

    /// Decodes `samples` and scores them against their `kind` targets.
    pub fn evaluate(
        &mut self,
        samples: &[RegionSample],
        kind: TargetKind,
        beam: usize,
        lexicon: &BTreeMap<String, Pos>,
    ) -> Result<(ScoreReport, Vec<String>)> {
        if samples.is_empty() {
            return Err(Error::config("evaluation split is empty"));
        }
        let cands = self.decode(samples, beam)?;
        let refs: Vec<String> = samples.iter().map(|s| self.model.vocab.detokenize(&s.target(kind))).collect();
        Ok((evaluate(&cands, &refs, lexicon), cands))
    }

    pub fn checkpoint(&self, config_hash: &str, config_text: &str, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint {
            tag: self.phase.tag().to_string(),
            step: self.step as u64,
            config_hash: config_hash.to_string(),
            config_text: config_text.to_string(),
            params: self.model.store.clone(),
            frozen: self.partition.frozen.clone(),
            adam: self.adam.clone(),
            metrics,
            vocab: self.model.vocab.clone(),
        }
    }
}

/// Copies the donor's text mixer, caption queries, task tokens and prefix
/// projection into `base`. Everything else stays untouched.
pub fn switch_mixer(base: &Model, donor: &ParamStore) -> Result<Model> {
    let mut out = base.clone();
    for (name, t) in base.store.iter().filter(|(n, _)| is_switchable(n)) {
        let d = donor.get(name).map_err(|_| Error::config(format!("donor lacks `{name}`")))?;
        if d.shape() != t.shape() {
            return Err(Error::config(format!("`{name}`: donor shape {:?} vs {:?}", d.shape(), t.shape())));
        }
        out.store.insert(name.clone(), d.clone());
    }
    if let Some(extra) = donor.names().find(|n| is_switchable(n) && !base.store.contains(n)) {
        return Err(Error::config(format!("donor carries `{extra}`, which the base model lacks")));
    }
    Ok(out)
}
