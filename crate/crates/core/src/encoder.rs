//! Frozen ViT-style image encoder.
//!
//! Patches are embedded linearly, given learned absolute positions, then
//! passed through pre-norm transformer blocks. Most blocks attend within
//! non-overlapping windows of the token grid; every `global_every`-th block
//! attends globally. A 1×1 projection neck with layer norm maps the embedding
//! width to the mixer width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub canvas: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub window: usize,
    pub global_every: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            canvas: 64,
            patch: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_dim: 128,
            window: 4,
            global_every: 2,
            out_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return Err(Error::config(format!("patch {} does not divide canvas {}", self.patch, self.canvas)));
        }
        let g = self.grid();
        if self.window == 0 || g % self.window != 0 {
            return Err(Error::config(format!("window {} does not divide grid {g}", self.window)));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide width {}", self.heads, self.embed_dim)));
        }
        if self.depth == 0 || self.global_every == 0 {
            return Err(Error::config("encoder depth and global interval must be positive"));
        }
        Ok(())
    }

    pub fn is_global(&self, block: usize) -> bool {
        (block + 1) % self.global_every == 0
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (e, m, d) = (self.embed_dim, self.mlp_dim, self.out_dim);
        let patch_in = self.patch * self.patch * 3;
        let g = self.grid();
        let block = 4 * e + 4 * (e * e + e) + (e * m + m) + (m * e + e);
        patch_in * e + e + g * g * e + self.depth * block + e * d + d + 2 * d
    }
}

pub fn build_encoder<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    const STD: f64 = 0.02;
    let e = cfg.embed_dim;
    let g = cfg.grid();
    store.linear("encoder/patch_embed", cfg.patch * cfg.patch * 3, e, STD, rng);
    store.normal("encoder/pos_embed", &[g * g, e], STD, rng);
    for i in 0..cfg.depth {
        let p = format!("encoder/blocks.{i}");
        store.layer_norm(&format!("{p}.norm1"), e);
        store.attention(&format!("{p}.attn"), e, e, STD, rng);
        store.layer_norm(&format!("{p}.norm2"), e);
        store.linear(&format!("{p}.mlp.lin1"), e, cfg.mlp_dim, STD, rng);
        store.linear(&format!("{p}.mlp.lin2"), cfg.mlp_dim, e, STD, rng);
    }
    store.linear("encoder/neck", e, cfg.out_dim, STD, rng);
    store.layer_norm("encoder/neck_norm", cfg.out_dim);
    Ok(())
}

/// Rearranges an `H×W×3` image into `G²` rows of flattened patches.
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let n = cfg.canvas;
    if image.shape() != [n, n, 3] {
        return Err(Error::contract(format!(
            "image shape {:?} does not match the {n}×{n}×3 canvas",
            image.shape()
        )));
    }
    let (p, g) = (cfg.patch, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(n * n * 3);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let row = (gy * p + py) * n + gx * p;
                out.extend_from_slice(&src[row * 3..(row + p) * 3]);
            }
        }
    }
    Tensor::new(vec![g * g, p * p * 3], out)
}

/// Row order that groups the grid into consecutive windows.
fn window_order(g: usize, w: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(g * g);
    for wy in 0..g / w {
        for wx in 0..g / w {
            for i in 0..w {
                for j in 0..w {
                    order.push((wy * w + i) * g + wx * w + j);
                }
            }
        }
    }
    order
}

fn attend(sess: &mut Session, cfg: &EncoderConfig, prefix: &str, h: Var, global: bool) -> Result<Var> {
    if global {
        return sess.attention(prefix, h, h, h, cfg.heads, None);
    }
    let (g, w) = (cfg.grid(), cfg.window);
    let order = window_order(g, w);
    let grouped = sess.tape.gather_rows(h, &order)?;
    let per = w * w;
    let mut outs = Vec::with_capacity(order.len() / per);
    for k in 0..order.len() / per {
        let win = sess.tape.slice_rows(grouped, k * per, per)?;
        outs.push(sess.attention(prefix, win, win, win, cfg.heads, None)?);
    }
    let joined = sess.tape.concat_rows(&outs)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    sess.tape.gather_rows(joined, &inverse)
}

/// Hidden states after the first `upto` blocks, before the neck.
pub fn forward_blocks(sess: &mut Session, cfg: &EncoderConfig, image: &Tensor, upto: usize) -> Result<Var> {
    let patches = sess.tape.constant(patchify(image, cfg)?);
    let mut x = sess.linear("encoder/patch_embed", patches)?;
    let pos = sess.param("encoder/pos_embed")?;
    x = sess.tape.add(x, pos)?;
    for i in 0..upto.min(cfg.depth) {
        let p = format!("encoder/blocks.{i}");
        let h = sess.layer_norm(&format!("{p}.norm1"), x)?;
        let a = attend(sess, cfg, &format!("{p}.attn"), h, cfg.is_global(i))?;
        x = sess.tape.add(x, a)?;
        let h = sess.layer_norm(&format!("{p}.norm2"), x)?;
        let h = sess.linear(&format!("{p}.mlp.lin1"), h)?;
        let h = sess.tape.gelu(h)?;
        let h = sess.linear(&format!("{p}.mlp.lin2"), h)?;
        x = sess.tape.add(x, h)?;
    }
    Ok(x)
}

/// Image token grid `G² × D` in row-major cell order.
pub fn encode_image(sess: &mut Session, cfg: &EncoderConfig, image: &Tensor) -> Result<Var> {
    let x = forward_blocks(sess, cfg, image, cfg.depth)?;
    let x = sess.linear("encoder/neck", x)?;
    sess.layer_norm("encoder/neck_norm", x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    fn built(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        build_encoder(&mut store, cfg, &mut rng(seed)).unwrap();
        store
    }

    fn test_image(seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..64 * 64 * 3).map(|_| r.random::<f64>()).collect();
        Tensor::new(vec![64, 64, 3], data).unwrap()
    }

    #[test]
    fn desk_config_count_matches_closed_form() {
        let cfg = EncoderConfig::default();
        let store = built(&cfg, 0);
        assert_eq!(store.count_scalars("encoder/"), cfg.param_count());
        // patch 12352, pos 4096, blocks 4·33472, neck 4160 + 128
        assert_eq!(cfg.param_count(), 12_352 + 4_096 + 4 * 33_472 + 4_160 + 128);
    }

    #[test]
    fn divisibility_is_checked() {
        let bad = EncoderConfig { patch: 7, ..EncoderConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EncoderConfig { window: 3, ..EncoderConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = EncoderConfig::default();
        assert_eq!(built(&cfg, 5), built(&cfg, 5));
        assert_ne!(built(&cfg, 5), built(&cfg, 6));
    }

    #[test]
    fn full_window_equals_global_attention() {
        let windowed = EncoderConfig { window: 8, global_every: 100, ..EncoderConfig::default() };
        let global = EncoderConfig { window: 8, global_every: 1, ..EncoderConfig::default() };
        let store = built(&windowed, 3);
        let img = test_image(1);
        let mut a = Session::inference(&store);
        let va = encode_image(&mut a, &windowed, &img).unwrap();
        let mut b = Session::inference(&store);
        let vb = encode_image(&mut b, &global, &img).unwrap();
        assert_eq!(a.tape.value(va).data(), b.tape.value(vb).data());
    }

    #[test]
    fn zero_image_is_deterministic_and_shaped() {
        let cfg = EncoderConfig::default();
        let store = built(&cfg, 0);
        let img = Tensor::zeros(&[64, 64, 3]);
        let mut a = Session::inference(&store);
        let va = encode_image(&mut a, &cfg, &img).unwrap();
        let mut b = Session::inference(&store);
        let vb = encode_image(&mut b, &cfg, &img).unwrap();
        assert_eq!(a.tape.shape(va), &[64, 64]);
        assert_eq!(a.tape.value(va).data(), b.tape.value(vb).data());
        assert!(a.tape.value(va).is_finite());
        let wrong = Tensor::zeros(&[32, 32, 3]);
        assert!(matches!(encode_image(&mut a, &cfg, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn first_block_is_local() {
        let cfg = EncoderConfig::default();
        let store = built(&cfg, 2);
        let img = test_image(4);
        let mut other = img.clone();
        // perturb patch (row 1, col 2) → grid cell 10, which lives in window (0,0)
        for y in 8..16 {
            for x in 16..24 {
                other.data_mut()[(y * 64 + x) * 3] += 0.5;
            }
        }
        let mut a = Session::inference(&store);
        let va = forward_blocks(&mut a, &cfg, &img, 1).unwrap();
        let mut b = Session::inference(&store);
        let vb = forward_blocks(&mut b, &cfg, &other, 1).unwrap();
        let (ga, gb) = (a.tape.value(va), b.tape.value(vb));
        assert_ne!(ga.row(10), gb.row(10));
        for cell in 0..64 {
            let (row, col) = (cell / 8, cell % 8);
            if row >= 4 || col >= 4 {
                assert_eq!(ga.row(cell), gb.row(cell), "cell {cell} outside the window changed");
            }
        }
    }

    #[test]
    fn frozen_encoder_receives_no_gradient() {
        let cfg = EncoderConfig::default();
        let store = built(&cfg, 0);
        let trainable = std::collections::BTreeSet::new();
        let mut s = Session::new(&store, &trainable);
        let v = encode_image(&mut s, &cfg, &test_image(0)).unwrap();
        let loss = s.tape.sum(v).unwrap();
        s.tape.backward(loss).unwrap();
        assert!(s.grads().values().all(|g| g.data().iter().all(|&x| x == 0.0)));
    }
}
