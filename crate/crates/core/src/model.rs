//! The assembled captioner: frozen encoder, prompt encoder, SAM stage and
//! language model around a trainable caption mixer, task tokens and prefix
//! projection.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{build_encoder, encode_image, EncoderConfig};
use crate::error::{Error, Result};
use crate::lm::vocab::{BOS, EOS, PAD, UNK};
use crate::lm::{beam_search, caption_loss, init_lm, lm_forward, BeamConfig, LmConfig, Vocabulary, LM_PREFIX};
use crate::mixer::{self, caption_features, predict_mask, run_sam_stage, MixerConfig, MixerInputs, SamOutputs, SAM_PREFIX};
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};
use crate::prompt::{self, Prompt, PromptConfig, PromptKind};
use crate::scenegen::RegionSample;

pub const TASK_TOKENS: &str = "task_tokens";
pub const PREFIX_PROJ: &str = "prefix_proj";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mixer: MixerConfig,
    pub lm: LmConfig,
    pub mask_prompt_tokens: usize,
    pub prompt_kind: PromptKind,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn desk(vocab: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mixer: MixerConfig::default(),
            lm: LmConfig::desk(vocab),
            mask_prompt_tokens: 2,
            prompt_kind: PromptKind::Box,
            label_smoothing: 0.1,
        }
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig { d: self.mixer.d, canvas: self.encoder.canvas, mask_tokens: self.mask_prompt_tokens }
    }

    pub fn prefix_len(&self) -> usize {
        self.mixer.n_task_tokens + self.mixer.n_query_tokens
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mixer.validate()?;
        self.lm.validate()?;
        if self.encoder.out_dim != self.mixer.d {
            return Err(Error::config(format!(
                "encoder width {} differs from mixer width {}",
                self.encoder.out_dim, self.mixer.d
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Names of the frozen components.
pub fn is_frozen_component(name: &str) -> bool {
    name.starts_with("encoder/") || name.starts_with("prompt/") || name.starts_with(SAM_PREFIX) || name.starts_with(LM_PREFIX)
}

/// Names replaced when switching mixers.
pub fn is_switchable(name: &str) -> bool {
    name.starts_with(mixer::TEXT_PREFIX)
        || name == mixer::CAPTION_QUERIES
        || name == TASK_TOKENS
        || name.starts_with(&format!("{PREFIX_PROJ}."))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

/// Frozen-path outputs for one region, reusable across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub image: Arc<Tensor>,
    pub dense_pe: Arc<Tensor>,
    pub prompt: Tensor,
    pub sam_prompt: Tensor,
    pub sam_mask: Tensor,
    pub sam_dense: Tensor,
}

impl Model {
    /// Frozen parts come from `world_seed`, overridden by any frozen-component
    /// entries of `frozen`, which must carry the pretrained LM; trainable
    /// parts come from `init_seed`.
    pub fn build(config: ModelConfig, vocab: Vocabulary, frozen: &ParamStore, world_seed: u64, init_seed: u64) -> Result<Model> {
        config.validate()?;
        if vocab.len() != config.lm.vocab {
            return Err(Error::config(format!("vocabulary of {} vs language model of {}", vocab.len(), config.lm.vocab)));
        }
        let mut store = ParamStore::new();
        let mut w = ChaCha8Rng::seed_from_u64(world_seed);
        build_encoder(&mut store, &config.encoder, &mut w)?;
        prompt::init(&mut store, &config.prompt(), &mut w);
        mixer::init_sam_stage(&mut store, &config.mixer, &mut w)?;
        if !frozen.names().any(|n| n.starts_with(LM_PREFIX)) {
            return Err(Error::MissingParam(format!("{LM_PREFIX}*")));
        }
        for (n, t) in frozen.iter().filter(|(n, _)| is_frozen_component(n)) {
            if !n.starts_with(LM_PREFIX) {
                let have = store.get(n).map_err(|_| Error::config(format!("unexpected frozen parameter `{n}`")))?;
                if have.shape() != t.shape() {
                    return Err(Error::config(format!("frozen `{n}` has shape {:?}, expected {:?}", t.shape(), have.shape())));
                }
            }
            store.insert(n.clone(), t.clone());
        }
        let mut r = ChaCha8Rng::seed_from_u64(init_seed);
        let mut model = Model { config, store, vocab };
        model.init_trainable(&mut r)?;
        Ok(model)
    }

    /// Parameter names and shapes every model with `config` carries.
    pub fn layout(config: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        build_encoder(&mut store, &config.encoder, &mut r)?;
        prompt::init(&mut store, &config.prompt(), &mut r);
        mixer::init_sam_stage(&mut store, &config.mixer, &mut r)?;
        init_lm(&mut store, &config.lm, &mut r)?;
        let mut m = Model { config: *config, store, vocab: Vocabulary::from_words(Vec::<String>::new()) };
        m.init_trainable(&mut r)?;
        Ok(m.store.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect())
    }

    /// Wraps loaded parameters after checking them against [`Model::layout`].
    pub fn from_params(config: ModelConfig, vocab: Vocabulary, store: ParamStore) -> Result<Model> {
        if vocab.len() != config.lm.vocab {
            return Err(Error::config(format!("vocabulary of {} vs language model of {}", vocab.len(), config.lm.vocab)));
        }
        let layout = Model::layout(&config)?;
        for (name, shape) in &layout {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if let Some(extra) = store.names().find(|n| !layout.contains_key(*n)) {
            return Err(Error::config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model { config, store, vocab })
    }

    pub fn init_trainable(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let names: Vec<String> = self.store.names().filter(|n| is_switchable(n)).cloned().collect();
        for n in names {
            self.store.remove(&n);
        }
        let c = &self.config;
        mixer::init_text_stage(&mut self.store, &c.mixer, rng)?;
        self.store.normal(TASK_TOKENS, &[c.mixer.n_task_tokens, c.lm.d_lm], 0.02, rng);
        self.store.linear(PREFIX_PROJ, c.mixer.d, c.lm.d_lm, (c.mixer.d as f64).sqrt().recip() * 0.1, rng);
        Ok(())
    }

    pub fn prompt_for(&self, sample: &RegionSample) -> Prompt {
        match self.config.prompt_kind {
            PromptKind::Box => Prompt::Box(sample.bbox),
            PromptKind::Point => Prompt::Point(sample.point.0 as f64 + 0.5, sample.point.1 as f64 + 0.5),
            PromptKind::Mask => Prompt::Mask(sample.mask.clone()),
        }
    }

    /// Runs the frozen path on the tape of `sess`.
    pub fn frozen_path(&self, sess: &mut Session, image: &Tensor, prompt: &Prompt) -> Result<(MixerInputs, Var)> {
        let img = encode_image(sess, &self.config.encoder, image)?;
        self.frozen_path_from(sess, img, prompt)
    }

    /// The frozen path after the image encoder.
    pub fn frozen_path_from(&self, sess: &mut Session, img: Var, prompt: &Prompt) -> Result<(MixerInputs, Var)> {
        let grid = self.config.encoder.grid();
        let pe = sess.tape.constant(prompt::dense_pe(sess.store(), grid)?);
        let p = prompt::encode(sess, &self.config.prompt(), prompt)?.tokens;
        let sam = run_sam_stage(sess, &self.config.mixer, p, img, pe)?;
        let region = region_of(prompt, self.config.encoder.canvas)?;
        let inputs = MixerInputs { prompt: p, image: img, dense_pe: pe, sam, region, canvas: self.config.encoder.canvas };
        let mask = predict_mask(sess, &sam)?;
        Ok((inputs, mask))
    }

    /// Encoder output `I` for one image.
    pub fn image_features(&self, image: &Tensor) -> Result<Arc<Tensor>> {
        let mut s = Session::inference(&self.store);
        let v = encode_image(&mut s, &self.config.encoder, image)?;
        Ok(Arc::new(s.tape.value(v).clone()))
    }

    /// Frozen features of one region given its image's encoder output.
    pub fn region_features(&self, image: &Arc<Tensor>, prompt: &Prompt) -> Result<FrozenFeatures> {
        let mut s = Session::inference(&self.store);
        let img = s.tape.constant((**image).clone());
        let (x, _) = self.frozen_path_from(&mut s, img, prompt)?;
        let v = |var: Var| s.tape.value(var).clone();
        Ok(FrozenFeatures {
            image: Arc::clone(image),
            dense_pe: Arc::new(v(x.dense_pe)),
            prompt: v(x.prompt),
            sam_prompt: v(x.sam.prompt),
            sam_mask: v(x.sam.mask),
            sam_dense: v(x.sam.dense),
        })
    }

    pub fn frozen_features(&self, image: &Tensor, prompt: &Prompt) -> Result<FrozenFeatures> {
        self.region_features(&self.image_features(image)?, prompt)
    }

    /// FNV-1a over the names and bits of every frozen-component parameter.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (n, t) in self.store.iter().filter(|(n, _)| is_frozen_component(n)) {
            n.bytes().for_each(&mut mix);
            for v in t.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut mix);
            }
        }
        h
    }

    /// Places cached frozen features on the tape as constants.
    pub fn cached_inputs(&self, sess: &mut Session, f: &FrozenFeatures, prompt: &Prompt) -> Result<MixerInputs> {
        let t = &mut sess.tape;
        Ok(MixerInputs {
            prompt: t.constant(f.prompt.clone()),
            image: t.constant((*f.image).clone()),
            dense_pe: t.constant((*f.dense_pe).clone()),
            sam: SamOutputs {
                prompt: t.constant(f.sam_prompt.clone()),
                mask: t.constant(f.sam_mask.clone()),
                dense: t.constant(f.sam_dense.clone()),
            },
            region: region_of(prompt, self.config.encoder.canvas)?,
            canvas: self.config.encoder.canvas,
        })
    }

    /// LM prefix `[T; proj(Q̂)]`.
    pub fn prefix(&self, sess: &mut Session, x: &MixerInputs) -> Result<Var> {
        let q = caption_features(sess, &self.config.mixer, x)?;
        let proj = sess.linear(PREFIX_PROJ, q)?;
        let t = sess.param(TASK_TOKENS)?;
        sess.tape.concat_rows(&[t, proj])
    }

    /// Teacher-forced loss for `target` (words then EOS).
    pub fn loss(&self, sess: &mut Session, x: &MixerInputs, target: &[u32]) -> Result<Var> {
        let prefix = self.prefix(sess, x)?;
        let mut input = vec![BOS];
        input.extend_from_slice(&target[..target.len() - 1]);
        let logits = lm_forward(sess, &self.config.lm, Some(prefix), &input)?;
        caption_loss(&mut sess.tape, logits, target, self.config.label_smoothing)
    }

    pub fn beam_config(&self, beam: usize) -> BeamConfig {
        BeamConfig {
            beam,
            max_len: self.config.lm.max_len - self.config.prefix_len() - 1,
            length_norm: true,
            eos: EOS,
            banned: vec![PAD, BOS, UNK],
        }
    }

    /// Beam-decodes from a computed prefix; returns tokens without EOS.
    pub fn decode_prefix(&self, prefix: &Tensor, beam: usize) -> Result<Vec<u32>> {
        let cfg = self.beam_config(beam);
        let scorer = |ctx: &[u32]| -> Result<Vec<f64>> {
            let mut s = Session::inference(&self.store);
            let p = s.tape.constant(prefix.clone());
            let logits = lm_forward(&mut s, &self.config.lm, Some(p), ctx)?;
            let last = s.tape.slice_rows(logits, ctx.len() - 1, 1)?;
            let lp = s.tape.log_softmax(last)?;
            Ok(s.tape.value(lp).data().to_vec())
        };
        let mut h = beam_search(scorer, BOS, &cfg)?;
        if h.tokens.last() == Some(&EOS) {
            h.tokens.pop();
        }
        Ok(h.tokens)
    }

    pub fn caption_from_features(&self, f: &FrozenFeatures, prompt: &Prompt, beam: usize) -> Result<Vec<u32>> {
        let mut s = Session::inference(&self.store);
        let x = self.cached_inputs(&mut s, f, prompt)?;
        let p = self.prefix(&mut s, &x)?;
        let prefix = s.tape.value(p).clone();
        self.decode_prefix(&prefix, beam)
    }

    /// Caption tokens and `G×G` mask logits for one region prompt.
    pub fn infer(&self, image: &Tensor, prompt: &Prompt, beam: usize) -> Result<(Vec<u32>, Tensor)> {
        let mut s = Session::inference(&self.store);
        let (x, mask) = self.frozen_path(&mut s, image, prompt)?;
        let p = self.prefix(&mut s, &x)?;
        let prefix = s.tape.value(p).clone();
        let mask = s.tape.value(mask).clone();
        Ok((self.decode_prefix(&prefix, beam)?, mask))
    }

    pub fn frozen_names(&self) -> BTreeSet<String> {
        self.store.names().filter(|n| is_frozen_component(n)).cloned().collect()
    }

    /// Scalar count of the trainable-by-default parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.store.iter().filter(|(n, _)| !is_frozen_component(n)).map(|(_, t)| t.len()).sum()
    }
}

/// Bounding box of a prompt, used by the ROI baselines.
pub fn region_of(prompt: &Prompt, canvas: usize) -> Result<crate::scenegen::PixelBox> {
    use crate::scenegen::{mask_bbox, PixelBox};
    match prompt {
        Prompt::Box(b) => Ok(*b),
        Prompt::Point(x, y) => {
            let n = canvas as f64;
            Ok(PixelBox { x0: (x - 0.5).max(0.0), y0: (y - 0.5).max(0.0), x1: (x + 0.5).min(n), y1: (y + 0.5).min(n) })
        }
        Prompt::Mask(m) => mask_bbox(m).ok_or_else(|| Error::contract("empty mask prompt")),
    }
}
