//! Two-way feature mixers.
//!
//! The frozen SAM stage fuses prompt tokens and mask tokens with the image
//! grid. The trainable text stage stacks the same block type over the
//! prompt tokens plus caption queries `Q` and returns the fused queries `Q̂`
//! that condition the language model. ROI-pooling and mask-query variants
//! serve as ablation baselines.

mod roi;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use roi::{bilinear, roi_sampling_matrix};

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::{ParamStore, Session};
use crate::scenegen::PixelBox;

pub const TEXT_PREFIX: &str = "text_mixer/";
pub const SAM_PREFIX: &str = "sam/";
pub const CAPTION_QUERIES: &str = "caption_queries";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    TextQueryWithSam,
    TextQueryWithoutSam,
    SamQueryDecode,
    RoiAlign,
    RoiAlignMlp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TextQueryWithSam,
        Variant::TextQueryWithoutSam,
        Variant::SamQueryDecode,
        Variant::RoiAlign,
        Variant::RoiAlignMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextQueryWithSam => "text_query_with_sam_tokens",
            Variant::TextQueryWithoutSam => "text_query_without_sam_tokens",
            Variant::SamQueryDecode => "sam_query_decode",
            Variant::RoiAlign => "roi_align",
            Variant::RoiAlignMlp => "roi_align_mlp",
        }
    }

    pub fn is_text_query(self) -> bool {
        matches!(self, Variant::TextQueryWithSam | Variant::TextQueryWithoutSam)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!("unknown mixer variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerConfig {
    pub d: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub downsample_rate: usize,
    pub n_text_layers: usize,
    pub n_sam_layers: usize,
    pub n_query_tokens: usize,
    pub n_mask_tokens: usize,
    pub n_task_tokens: usize,
    pub variant: Variant,
    /// Include the SAM-stage mask tokens in the text stage's sparse set.
    pub text_uses_mask_tokens: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            d: 64,
            mlp_dim: 256,
            heads: 4,
            downsample_rate: 2,
            n_text_layers: 12,
            n_sam_layers: 2,
            n_query_tokens: 8,
            n_mask_tokens: 4,
            n_task_tokens: 6,
            variant: Variant::TextQueryWithSam,
            text_uses_mask_tokens: false,
        }
    }
}

impl MixerConfig {
    pub fn paper_scale(n_text_layers: usize) -> Self {
        MixerConfig {
            d: 256,
            mlp_dim: 2048,
            heads: 8,
            n_text_layers,
            ..MixerConfig::default()
        }
    }

    pub fn cross_dim(&self) -> usize {
        self.d / self.downsample_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_rate == 0 || self.d % self.downsample_rate != 0 {
            return Err(Error::config(format!("downsample rate {} does not divide d={}", self.downsample_rate, self.d)));
        }
        if self.heads == 0 || self.cross_dim() % self.heads != 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide the attention widths", self.heads)));
        }
        if self.n_text_layers == 0 {
            return Err(Error::config("the text mixer needs at least one layer"));
        }
        if self.n_query_tokens == 0 || self.n_mask_tokens == 0 {
            return Err(Error::config("query and mask token counts must be positive"));
        }
        Ok(())
    }
}

fn attention_count(d: usize, internal: usize) -> usize {
    3 * (d * internal + internal) + internal * d + d
}

pub fn block_param_count(cfg: &MixerConfig) -> usize {
    let (d, m) = (cfg.d, cfg.mlp_dim);
    attention_count(d, d) + 2 * attention_count(d, cfg.cross_dim()) + (d * m + m + m * d + d) + 4 * 2 * d
}

pub fn tail_param_count(cfg: &MixerConfig) -> usize {
    attention_count(cfg.d, cfg.cross_dim()) + 2 * cfg.d
}

/// Trainable parameters of the text stage: blocks, tail, caption queries and
/// task tokens of width `d_lm`.
pub fn count_params(cfg: &MixerConfig, d_lm: usize) -> usize {
    cfg.n_text_layers * block_param_count(cfg)
        + tail_param_count(cfg)
        + cfg.n_query_tokens * cfg.d
        + cfg.n_task_tokens * d_lm
}

fn init_std(fan_in: usize) -> f64 {
    (fan_in as f64).sqrt().recip()
}

/// Scale of freshly drawn block projections.
#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn,
    Scaled(f64),
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::FanIn => init_std(fan_in),
            Init::Scaled(f) => f * init_std(fan_in),
        }
    }
}

/// Scale of the trainable text stack relative to `1/sqrt(fan_in)`.
pub const TEXT_INIT_SCALE: f64 = 0.577_350_269_189_625_8;

fn init_block<R: Rng>(store: &mut ParamStore, p: &str, cfg: &MixerConfig, init: Init, rng: &mut R) {
    let (d, c, m) = (cfg.d, cfg.cross_dim(), cfg.mlp_dim);
    store.attention(&format!("{p}.self_attn"), d, d, init.std(d), rng);
    store.attention(&format!("{p}.cross_t2i"), d, c, init.std(d), rng);
    store.attention(&format!("{p}.cross_i2t"), d, c, init.std(d), rng);
    store.linear(&format!("{p}.mlp.lin1"), d, m, init.std(d), rng);
    store.linear(&format!("{p}.mlp.lin2"), m, d, init.std(m), rng);
    for i in 1..=4 {
        store.layer_norm(&format!("{p}.norm{i}"), d);
    }
}

fn init_stack<R: Rng>(store: &mut ParamStore, prefix: &str, layers: usize, cfg: &MixerConfig, init: Init, rng: &mut R) {
    for i in 0..layers {
        init_block(store, &format!("{prefix}blocks.{i}"), cfg, init, rng);
    }
    store.attention(&format!("{prefix}final_attn"), cfg.d, cfg.cross_dim(), init.std(cfg.d), rng);
    store.layer_norm(&format!("{prefix}final_norm"), cfg.d);
}

pub fn init_sam_stage<R: Rng>(store: &mut ParamStore, cfg: &MixerConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    store.normal(&format!("{SAM_PREFIX}mask_tokens"), &[cfg.n_mask_tokens, cfg.d], 1.0, rng);
    init_stack(store, SAM_PREFIX, cfg.n_sam_layers, cfg, Init::FanIn, rng);
    Ok(())
}

/// Trainable parameters of the configured variant, excluding task tokens and
/// the prefix projection.
pub fn init_text_stage<R: Rng>(store: &mut ParamStore, cfg: &MixerConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    match cfg.variant {
        Variant::TextQueryWithSam | Variant::TextQueryWithoutSam => {
            store.normal(CAPTION_QUERIES, &[cfg.n_query_tokens, d], 1.0, rng);
            init_stack(store, TEXT_PREFIX, cfg.n_text_layers, cfg, Init::Scaled(TEXT_INIT_SCALE), rng);
        }
        Variant::SamQueryDecode => {
            store.normal(&format!("{TEXT_PREFIX}query_mix"), &[cfg.n_query_tokens, cfg.n_mask_tokens], init_std(cfg.n_mask_tokens), rng);
            store.linear(&format!("{TEXT_PREFIX}query_proj"), d, d, init_std(d), rng);
        }
        Variant::RoiAlign => {
            store.linear(&format!("{TEXT_PREFIX}roi_proj"), 4 * d, cfg.n_query_tokens * d, init_std(4 * d), rng);
        }
        Variant::RoiAlignMlp => {
            store.linear(&format!("{TEXT_PREFIX}roi_mlp.lin1"), 4 * d, cfg.mlp_dim, init_std(4 * d), rng);
            store.linear(&format!("{TEXT_PREFIX}roi_mlp.lin2"), cfg.mlp_dim, cfg.n_query_tokens * d, init_std(cfg.mlp_dim), rng);
        }
    }
    Ok(())
}

/// One four-sublayer block. `queries` are the sparse tokens, `keys` the dense
/// grid; positional encodings are re-added before every attention.
#[allow(clippy::too_many_arguments)]
pub fn two_way_block(
    sess: &mut Session,
    prefix: &str,
    cfg: &MixerConfig,
    queries: Var,
    keys: Var,
    query_pe: Var,
    key_pe: Var,
) -> Result<(Var, Var)> {
    let t = &mut sess.tape;
    let qs = t.shape(queries).to_vec();
    let ks = t.shape(keys).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != cfg.d || ks[1] != cfg.d {
        return Err(Error::contract(format!("two-way block got sparse {qs:?} and dense {ks:?} for d={}", cfg.d)));
    }
    let h = cfg.heads;

    let q = sess.tape.add(queries, query_pe)?;
    let a = sess.attention(&format!("{prefix}.self_attn"), q, q, queries, h, None)?;
    let x = sess.tape.add(queries, a)?;
    let queries = sess.layer_norm(&format!("{prefix}.norm1"), x)?;

    let q = sess.tape.add(queries, query_pe)?;
    let k = sess.tape.add(keys, key_pe)?;
    let a = sess.attention(&format!("{prefix}.cross_t2i"), q, k, keys, h, None)?;
    let x = sess.tape.add(queries, a)?;
    let queries = sess.layer_norm(&format!("{prefix}.norm2"), x)?;

    let m = sess.linear(&format!("{prefix}.mlp.lin1"), queries)?;
    let m = sess.tape.gelu(m)?;
    let m = sess.linear(&format!("{prefix}.mlp.lin2"), m)?;
    let x = sess.tape.add(queries, m)?;
    let queries = sess.layer_norm(&format!("{prefix}.norm3"), x)?;

    let q = sess.tape.add(queries, query_pe)?;
    let k = sess.tape.add(keys, key_pe)?;
    let a = sess.attention(&format!("{prefix}.cross_i2t"), k, q, queries, h, None)?;
    let x = sess.tape.add(keys, a)?;
    let keys = sess.layer_norm(&format!("{prefix}.norm4"), x)?;
    Ok((queries, keys))
}

/// Tokens flowing through a stack of blocks.
#[derive(Debug, Clone, Copy)]
pub struct MixState {
    pub sparse: Var,
    pub dense: Var,
    pub sparse_pe: Var,
    pub dense_pe: Var,
}

/// Runs blocks `range` of the stack under `prefix`.
pub fn run_blocks(
    sess: &mut Session,
    prefix: &str,
    cfg: &MixerConfig,
    state: MixState,
    range: std::ops::Range<usize>,
) -> Result<MixState> {
    let mut s = state;
    for i in range {
        let (sparse, dense) = two_way_block(sess, &format!("{prefix}blocks.{i}"), cfg, s.sparse, s.dense, s.sparse_pe, s.dense_pe)?;
        s.sparse = sparse;
        s.dense = dense;
    }
    Ok(s)
}

/// Final sparse→dense attention and norm.
pub fn run_tail(sess: &mut Session, prefix: &str, cfg: &MixerConfig, s: MixState) -> Result<Var> {
    let q = sess.tape.add(s.sparse, s.sparse_pe)?;
    let k = sess.tape.add(s.dense, s.dense_pe)?;
    let a = sess.attention(&format!("{prefix}final_attn"), q, k, s.dense, cfg.heads, None)?;
    let x = sess.tape.add(s.sparse, a)?;
    sess.layer_norm(&format!("{prefix}final_norm"), x)
}

#[derive(Debug, Clone, Copy)]
pub struct SamOutputs {
    /// Fused prompt rows `P̂_sam`.
    pub prompt: Var,
    /// Fused mask tokens `M̂`.
    pub mask: Var,
    /// Updated image grid `Î_sam`.
    pub dense: Var,
}

pub fn run_sam_stage(sess: &mut Session, cfg: &MixerConfig, prompt: Var, image: Var, dense_pe: Var) -> Result<SamOutputs> {
    let n_p = sess.tape.shape(prompt)[0];
    let m = sess.param(&format!("{SAM_PREFIX}mask_tokens"))?;
    let sparse = sess.tape.concat_rows(&[prompt, m])?;
    let state = MixState { sparse, dense: image, sparse_pe: sparse, dense_pe };
    let out = run_blocks(sess, SAM_PREFIX, cfg, state, 0..cfg.n_sam_layers)?;
    let fused = run_tail(sess, SAM_PREFIX, cfg, out)?;
    Ok(SamOutputs {
        prompt: sess.tape.slice_rows(fused, 0, n_p)?,
        mask: sess.tape.slice_rows(fused, n_p, cfg.n_mask_tokens)?,
        dense: out.dense,
    })
}

/// Mask logits `G×G` from the first fused mask token.
pub fn predict_mask(sess: &mut Session, sam: &SamOutputs) -> Result<Var> {
    let first = sess.tape.slice_rows(sam.mask, 0, 1)?;
    let logits = sess.tape.matmul_t(sam.dense, first)?;
    let cells = sess.tape.shape(logits)[0];
    let g = (cells as f64).sqrt().round() as usize;
    sess.tape.reshape(logits, &[g, g])
}

/// Everything the caption-side variants may read.
#[derive(Debug, Clone, Copy)]
pub struct MixerInputs {
    /// Raw prompt tokens `P`.
    pub prompt: Var,
    /// Encoder grid `I`.
    pub image: Var,
    pub dense_pe: Var,
    pub sam: SamOutputs,
    pub region: PixelBox,
    pub canvas: usize,
}

/// Initial state of the text stage for a text-query variant.
pub fn text_stage_state(sess: &mut Session, cfg: &MixerConfig, x: &MixerInputs) -> Result<MixState> {
    if !cfg.variant.is_text_query() {
        return Err(Error::contract(format!("variant {} has no text stage", cfg.variant)));
    }
    let q = sess.param(CAPTION_QUERIES)?;
    let (sparse, sparse_pe, dense) = match cfg.variant {
        Variant::TextQueryWithSam => {
            if cfg.text_uses_mask_tokens {
                let m0 = sess.param(&format!("{SAM_PREFIX}mask_tokens"))?;
                (
                    sess.tape.concat_rows(&[x.sam.prompt, x.sam.mask, q])?,
                    sess.tape.concat_rows(&[x.prompt, m0, q])?,
                    x.sam.dense,
                )
            } else {
                (
                    sess.tape.concat_rows(&[x.sam.prompt, q])?,
                    sess.tape.concat_rows(&[x.prompt, q])?,
                    x.sam.dense,
                )
            }
        }
        Variant::TextQueryWithoutSam => {
            let s = sess.tape.concat_rows(&[x.prompt, q])?;
            (s, s, x.image)
        }
        _ => unreachable!("checked above"),
    };
    Ok(MixState { sparse, dense, sparse_pe, dense_pe: x.dense_pe })
}

pub fn run_text_stage(sess: &mut Session, cfg: &MixerConfig, x: &MixerInputs) -> Result<Var> {
    let state = text_stage_state(sess, cfg, x)?;
    let out = run_blocks(sess, TEXT_PREFIX, cfg, state, 0..cfg.n_text_layers)?;
    let fused = run_tail(sess, TEXT_PREFIX, cfg, out)?;
    let rows = sess.tape.shape(fused)[0];
    sess.tape.slice_rows(fused, rows - cfg.n_query_tokens, cfg.n_query_tokens)
}

/// `n_q × D` caption features for any variant.
pub fn caption_features(sess: &mut Session, cfg: &MixerConfig, x: &MixerInputs) -> Result<Var> {
    let (nq, d) = (cfg.n_query_tokens, cfg.d);
    match cfg.variant {
        Variant::TextQueryWithSam | Variant::TextQueryWithoutSam => run_text_stage(sess, cfg, x),
        Variant::SamQueryDecode => {
            let a = sess.param(&format!("{TEXT_PREFIX}query_mix"))?;
            let mixed = sess.tape.matmul(a, x.sam.mask)?;
            sess.linear(&format!("{TEXT_PREFIX}query_proj"), mixed)
        }
        Variant::RoiAlign | Variant::RoiAlignMlp => {
            let pooled = roi_align_pool(sess, x.image, &x.region, x.canvas, 2)?;
            let flat = sess.tape.reshape(pooled, &[1, 4 * d])?;
            let out = if cfg.variant == Variant::RoiAlign {
                sess.linear(&format!("{TEXT_PREFIX}roi_proj"), flat)?
            } else {
                let h = sess.linear(&format!("{TEXT_PREFIX}roi_mlp.lin1"), flat)?;
                let h = sess.tape.gelu(h)?;
                sess.linear(&format!("{TEXT_PREFIX}roi_mlp.lin2"), h)?
            };
            sess.tape.reshape(out, &[nq, d])
        }
    }
}

/// Bilinear ROI pooling of a `G²×D` grid to `out² × D`.
pub fn roi_align_pool(sess: &mut Session, grid: Var, region: &PixelBox, canvas: usize, out: usize) -> Result<Var> {
    let cells = sess.tape.shape(grid)[0];
    let g = (cells as f64).sqrt().round() as usize;
    let s = roi_sampling_matrix(g, canvas, region, out)?;
    let s = sess.tape.constant(s);
    sess.tape.matmul(s, grid)
}
