//! Plain-text run configuration: `[section]` headers and `key = value`
//! lines, `#` comments. Unset keys keep their defaults; unknown keys are
//! errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::LmPretrainConfig;
use crate::model::ModelConfig;
use crate::prefit::PrefitConfig;
use crate::prompt::PromptKind;
use crate::scenegen::SceneConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "SCA_SEED";

/// Corpus sizes in images. Scene seeds of the splits never overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub detection_images: usize,
    pub caption_images: usize,
    pub val_images: usize,
    pub lm_images: usize,
    /// Shifts every split's scene seeds.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { detection_images: 600, caption_images: 60, val_images: 30, lm_images: 400, seed: 0 }
    }
}

impl DataConfig {
    pub const DETECTION_SEED: u64 = 1_000_000;
    pub const CAPTION_SEED: u64 = 2_000_000;
    pub const VAL_SEED: u64 = 3_000_000;
    pub const LM_SEED: u64 = 4_000_000;
    pub const LM_HELDOUT_SEED: u64 = 5_000_000;

    /// First scene seed of a split base.
    pub fn first_seed(&self, base: u64) -> u64 {
        base + self.seed.wrapping_mul(10_000_000)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lm_pretrain: LmPretrainConfig,
    pub data: DataConfig,
    pub prefit: PrefitConfig,
    /// Seed of the frozen encoder, prompt encoder and SAM-stage weights.
    pub world_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let model = ModelConfig::desk(scene.vocabulary().len());
        RunConfig { scene, model, train: TrainConfig::default(), lm_pretrain: LmPretrainConfig::default(), data: DataConfig::default(), prefit: PrefitConfig::default(), world_seed: 7 }
    }
}

fn prompt_name(k: PromptKind) -> &'static str {
    match k {
        PromptKind::Point => "point",
        PromptKind::Box => "box",
        PromptKind::Mask => "mask",
    }
}

fn parse_prompt(s: &str) -> Result<PromptKind> {
    match s {
        "point" => Ok(PromptKind::Point),
        "box" => Ok(PromptKind::Box),
        "mask" => Ok(PromptKind::Mask),
        _ => Err(Error::config(format!("unknown prompt kind `{s}` (point, box, mask)"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Splits text into `section.key -> value`.
pub fn parse_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[') {
            section = s
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(format!("line {}", i + 1), "unterminated section header"))?
                .trim()
                .to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("line {}", i + 1), format!("expected key = value, got `{line}`")))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::parse(format!("line {}", i + 1), format!("`{key}` set twice")));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (key, v) in parse_sections(text)? {
            c.set(&key, &v)?;
        }
        c.derive();
        c.validate()?;
        Ok(c)
    }

    /// Fills the fields fixed by others.
    fn derive(&mut self) {
        self.model.encoder.canvas = self.scene.canvas;
        self.model.encoder.out_dim = self.model.mixer.d;
        self.model.lm.vocab = self.scene.vocabulary().len();
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.prefit.validate()?;
        if self.lm_pretrain.lr <= 0.0 || !self.lm_pretrain.lr.is_finite() {
            return Err(Error::config("lm_pretrain.lr must be positive"));
        }
        let d = &self.data;
        if d.detection_images == 0 || d.caption_images == 0 || d.val_images == 0 || d.lm_images == 0 {
            return Err(Error::config("every data split needs at least one image"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, md, t, p, d) = (&mut self.scene, &mut self.model, &mut self.train, &mut self.lm_pretrain, &mut self.data);
        let (e, m, l) = (&mut md.encoder, &mut md.mixer, &mut md.lm);
        match key {
            "scene.canvas" => s.canvas = num(key, v)?,
            "scene.min_objects" => s.min_objects = num(key, v)?,
            "scene.max_objects" => s.max_objects = num(key, v)?,
            "scene.noise" => s.noise = num(key, v)?,
            "encoder.patch" => e.patch = num(key, v)?,
            "encoder.embed_dim" => e.embed_dim = num(key, v)?,
            "encoder.depth" => e.depth = num(key, v)?,
            "encoder.heads" => e.heads = num(key, v)?,
            "encoder.mlp_dim" => e.mlp_dim = num(key, v)?,
            "encoder.window" => e.window = num(key, v)?,
            "encoder.global_every" => e.global_every = num(key, v)?,
            "mixer.d" => m.d = num(key, v)?,
            "mixer.mlp_dim" => m.mlp_dim = num(key, v)?,
            "mixer.heads" => m.heads = num(key, v)?,
            "mixer.downsample_rate" => m.downsample_rate = num(key, v)?,
            "mixer.n_text_layers" => m.n_text_layers = num(key, v)?,
            "mixer.n_sam_layers" => m.n_sam_layers = num(key, v)?,
            "mixer.n_query_tokens" => m.n_query_tokens = num(key, v)?,
            "mixer.n_mask_tokens" => m.n_mask_tokens = num(key, v)?,
            "mixer.n_task_tokens" => m.n_task_tokens = num(key, v)?,
            "mixer.variant" => m.variant = v.parse()?,
            "mixer.text_uses_mask_tokens" => m.text_uses_mask_tokens = flag(key, v)?,
            "lm.d_lm" => l.d_lm = num(key, v)?,
            "lm.layers" => l.layers = num(key, v)?,
            "lm.heads" => l.heads = num(key, v)?,
            "lm.mlp_dim" => l.mlp_dim = num(key, v)?,
            "lm.max_len" => l.max_len = num(key, v)?,
            "model.world_seed" => self.world_seed = num(key, v)?,
            "model.mask_prompt_tokens" => md.mask_prompt_tokens = num(key, v)?,
            "model.prompt" => md.prompt_kind = parse_prompt(v)?,
            "model.label_smoothing" => md.label_smoothing = num(key, v)?,
            "train.mixer_lr" => t.mixer_lr = num(key, v)?,
            "train.lm_lr" => t.lm_lr = num(key, v)?,
            "train.lr_ceiling" => t.lr_ceiling = num(key, v)?,
            "train.batch" => t.batch = num(key, v)?,
            "train.steps_pretrain" => t.steps_pretrain = num(key, v)?,
            "train.steps_finetune" => t.steps_finetune = num(key, v)?,
            "train.ratio" => {
                let (a, b) = v.split_once(':').ok_or_else(|| Error::config(format!("`{key}`: expected A:B, got `{v}`")))?;
                t.ratio = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "train.lsj" => {
                t.lsj = if v == "off" {
                    None
                } else {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| Error::config(format!("`{key}`: expected off or MIN,MAX, got `{v}`")))?;
                    Some((num(key, a.trim())?, num(key, b.trim())?))
                }
            }
            "train.seed" => t.seed = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.beam" => t.beam = num(key, v)?,
            "lm_pretrain.steps" => p.steps = num(key, v)?,
            "lm_pretrain.batch" => p.batch = num(key, v)?,
            "lm_pretrain.lr" => p.lr = num(key, v)?,
            "lm_pretrain.seed" => p.seed = num(key, v)?,
            "lm_pretrain.ppl_threshold" => p.ppl_threshold = num(key, v)?,
            "lm_pretrain.cond_prob" => p.cond_prob = num(key, v)?,
            "lm_pretrain.content_noise" => p.content_noise = num(key, v)?,
            "data.detection_images" => d.detection_images = num(key, v)?,
            "data.caption_images" => d.caption_images = num(key, v)?,
            "data.val_images" => d.val_images = num(key, v)?,
            "data.lm_images" => d.lm_images = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "prefit.steps" => self.prefit.steps = num(key, v)?,
            "prefit.batch" => self.prefit.batch = num(key, v)?,
            "prefit.lr" => self.prefit.lr = num(key, v)?,
            "prefit.seed" => self.prefit.seed = num(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Replaces the training and data seeds with `SCA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set_seed(num(SEED_ENV, v.trim())?);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    /// Canonical text listing every key; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let (s, e, m, l, t, p, d) =
            (&self.scene, &self.model.encoder, &self.model.mixer, &self.model.lm, &self.train, &self.lm_pretrain, &self.data);
        let mut o = String::new();
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(o, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(o, "{k} = {v}");
            }
            let _ = writeln!(o);
        };
        sec(
            "scene",
            vec![
                ("canvas", s.canvas.to_string()),
                ("min_objects", s.min_objects.to_string()),
                ("max_objects", s.max_objects.to_string()),
                ("noise", s.noise.to_string()),
            ],
        );
        sec(
            "encoder",
            vec![
                ("patch", e.patch.to_string()),
                ("embed_dim", e.embed_dim.to_string()),
                ("depth", e.depth.to_string()),
                ("heads", e.heads.to_string()),
                ("mlp_dim", e.mlp_dim.to_string()),
                ("window", e.window.to_string()),
                ("global_every", e.global_every.to_string()),
            ],
        );
        sec(
            "mixer",
            vec![
                ("d", m.d.to_string()),
                ("mlp_dim", m.mlp_dim.to_string()),
                ("heads", m.heads.to_string()),
                ("downsample_rate", m.downsample_rate.to_string()),
                ("n_text_layers", m.n_text_layers.to_string()),
                ("n_sam_layers", m.n_sam_layers.to_string()),
                ("n_query_tokens", m.n_query_tokens.to_string()),
                ("n_mask_tokens", m.n_mask_tokens.to_string()),
                ("n_task_tokens", m.n_task_tokens.to_string()),
                ("variant", m.variant.to_string()),
                ("text_uses_mask_tokens", m.text_uses_mask_tokens.to_string()),
            ],
        );
        sec(
            "lm",
            vec![
                ("d_lm", l.d_lm.to_string()),
                ("layers", l.layers.to_string()),
                ("heads", l.heads.to_string()),
                ("mlp_dim", l.mlp_dim.to_string()),
                ("max_len", l.max_len.to_string()),
            ],
        );
        sec(
            "model",
            vec![
                ("world_seed", self.world_seed.to_string()),
                ("mask_prompt_tokens", self.model.mask_prompt_tokens.to_string()),
                ("prompt", prompt_name(self.model.prompt_kind).to_string()),
                ("label_smoothing", self.model.label_smoothing.to_string()),
            ],
        );
        sec(
            "train",
            vec![
                ("mixer_lr", t.mixer_lr.to_string()),
                ("lm_lr", t.lm_lr.to_string()),
                ("lr_ceiling", t.lr_ceiling.to_string()),
                ("batch", t.batch.to_string()),
                ("steps_pretrain", t.steps_pretrain.to_string()),
                ("steps_finetune", t.steps_finetune.to_string()),
                ("ratio", format!("{}:{}", t.ratio.0, t.ratio.1)),
                ("lsj", t.lsj.map_or("off".to_string(), |(a, b)| format!("{a},{b}"))),
                ("seed", t.seed.to_string()),
                ("eval_every", t.eval_every.to_string()),
                ("beam", t.beam.to_string()),
            ],
        );
        sec(
            "lm_pretrain",
            vec![
                ("steps", p.steps.to_string()),
                ("batch", p.batch.to_string()),
                ("lr", p.lr.to_string()),
                ("seed", p.seed.to_string()),
                ("ppl_threshold", p.ppl_threshold.to_string()),
                ("cond_prob", p.cond_prob.to_string()),
                ("content_noise", p.content_noise.to_string()),
            ],
        );
        sec(
            "data",
            vec![
                ("detection_images", d.detection_images.to_string()),
                ("caption_images", d.caption_images.to_string()),
                ("val_images", d.val_images.to_string()),
                ("lm_images", d.lm_images.to_string()),
                ("seed", d.seed.to_string()),
            ],
        );
        let f = &self.prefit;
        sec(
            "prefit",
            vec![
                ("steps", f.steps.to_string()),
                ("batch", f.batch.to_string()),
                ("lr", f.lr.to_string()),
                ("seed", f.seed.to_string()),
            ],
        );
        o
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
