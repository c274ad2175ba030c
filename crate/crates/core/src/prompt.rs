//! Frozen prompt encoders turning points, boxes and masks into sparse tokens.
//!
//! Coordinates are embedded with random Fourier features: a frozen Gaussian
//! matrix maps `[0,1]²` to `D/2` frequencies whose sines and cosines form the
//! embedding. The same features evaluated at grid-cell centers give the
//! dense positional map of the image tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};
use crate::scenegen::PixelBox;

pub const PE_GAUSSIAN: &str = "prompt/pe_gaussian";
const POINT_EMBED: &str = "prompt/point_embed";
const CORNER_TL: &str = "prompt/corner_tl";
const CORNER_BR: &str = "prompt/corner_br";
const MASK_PROJ: &str = "prompt/mask_proj";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Point,
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    pub d: usize,
    pub canvas: usize,
    /// Tokens emitted for a mask prompt.
    pub mask_tokens: usize,
}

/// A prompt in canvas pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Point(f64, f64),
    Box(PixelBox),
    Mask(Tensor),
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Point(..) => PromptKind::Point,
            Prompt::Box(_) => PromptKind::Box,
            Prompt::Mask(_) => PromptKind::Mask,
        }
    }
}

/// Encoded prompt, `n_p × D`.
#[derive(Debug, Clone, Copy)]
pub struct PromptTokens {
    pub tokens: Var,
    pub kind: PromptKind,
}

pub fn init<R: Rng>(store: &mut ParamStore, cfg: &PromptConfig, rng: &mut R) {
    store.normal(PE_GAUSSIAN, &[2, cfg.d / 2], 1.0, rng);
    for name in [POINT_EMBED, CORNER_TL, CORNER_BR] {
        store.normal(name, &[cfg.d], 1.0, rng);
    }
    store.linear(MASK_PROJ, cfg.d, cfg.d * cfg.mask_tokens, 0.1, rng);
}

pub fn param_count(cfg: &PromptConfig) -> usize {
    let d = cfg.d;
    2 * (d / 2) + 3 * d + d * d * cfg.mask_tokens + d * cfg.mask_tokens
}

/// Fourier features of a normalized coordinate.
pub fn fourier_pe(gaussian: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::contract(format!("coordinate ({x}, {y}) outside [0,1]²")));
    }
    let half = gaussian.shape()[1];
    let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
    let g = gaussian.data();
    let mut out = vec![0.0; 2 * half];
    for j in 0..half {
        let phase = 2.0 * std::f64::consts::PI * (cx * g[j] + cy * g[half + j]);
        out[j] = phase.sin();
        out[half + j] = phase.cos();
    }
    Ok(out)
}

/// Positional map of a `grid × grid` token layout, one row per cell in
/// row-major order.
pub fn dense_pe(store: &ParamStore, grid: usize) -> Result<Tensor> {
    let g = store.get(PE_GAUSSIAN)?;
    let mut rows = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let x = (j as f64 + 0.5) / grid as f64;
            let y = (i as f64 + 0.5) / grid as f64;
            rows.push(fourier_pe(g, x, y)?);
        }
    }
    Tensor::from_rows(&rows)
}

fn norm_coord(v: f64, canvas: usize) -> f64 {
    v / canvas as f64
}

pub fn encode(sess: &mut Session, cfg: &PromptConfig, prompt: &Prompt) -> Result<PromptTokens> {
    let gaussian = sess.store().get(PE_GAUSSIAN)?.clone();
    let n = cfg.canvas as f64;
    let tokens = match prompt {
        Prompt::Point(x, y) => {
            if !(0.0..=n).contains(x) || !(0.0..=n).contains(y) {
                return Err(Error::contract(format!("point ({x}, {y}) outside the canvas")));
            }
            let pe = fourier_pe(&gaussian, norm_coord(*x, cfg.canvas), norm_coord(*y, cfg.canvas))?;
            let pe = sess.tape.constant(Tensor::new(vec![1, cfg.d], pe)?);
            let emb = sess.param(POINT_EMBED)?;
            let emb = sess.tape.reshape(emb, &[1, cfg.d])?;
            sess.tape.add(pe, emb)?
        }
        Prompt::Box(b) => {
            if b.x1 <= b.x0 || b.y1 <= b.y0 {
                return Err(Error::contract(format!("degenerate box {b:?}")));
            }
            if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > n || b.y1 > n {
                return Err(Error::contract(format!("box {b:?} outside the {n}px canvas")));
            }
            let tl = fourier_pe(&gaussian, norm_coord(b.x0, cfg.canvas), norm_coord(b.y0, cfg.canvas))?;
            let br = fourier_pe(&gaussian, norm_coord(b.x1, cfg.canvas), norm_coord(b.y1, cfg.canvas))?;
            let pe = sess.tape.constant(Tensor::new(vec![2, cfg.d], [tl, br].concat())?);
            let a = sess.param(CORNER_TL)?;
            let b = sess.param(CORNER_BR)?;
            let a = sess.tape.reshape(a, &[1, cfg.d])?;
            let b = sess.tape.reshape(b, &[1, cfg.d])?;
            let types = sess.tape.concat_rows(&[a, b])?;
            sess.tape.add(pe, types)?
        }
        Prompt::Mask(mask) => {
            let summary = mask_summary(&gaussian, mask, cfg)?;
            let s = sess.tape.constant(summary);
            let flat = sess.linear(MASK_PROJ, s)?;
            sess.tape.reshape(flat, &[cfg.mask_tokens, cfg.d])?
        }
    };
    Ok(PromptTokens { tokens, kind: prompt.kind() })
}

/// Coverage-weighted average of cell positional features, `1 × D`.
fn mask_summary(gaussian: &Tensor, mask: &Tensor, cfg: &PromptConfig) -> Result<Tensor> {
    let n = cfg.canvas;
    if mask.shape() != [n, n] {
        return Err(Error::Dimension {
            op: "encode_mask",
            lhs: mask.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let mut acc = vec![0.0; cfg.d];
    let mut total = 0.0;
    for y in 0..n {
        for x in 0..n {
            let w = mask.data()[y * n + x];
            if w > 0.0 {
                let pe = fourier_pe(gaussian, (x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64)?;
                acc.iter_mut().zip(&pe).for_each(|(a, p)| *a += w * p);
                total += w;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::contract("empty mask prompt"));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Tensor::new(vec![1, cfg.d], acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    fn setup() -> (ParamStore, PromptConfig) {
        let cfg = PromptConfig { d: 16, canvas: 64, mask_tokens: 2 };
        let mut store = ParamStore::new();
        init(&mut store, &cfg, &mut rng(0));
        (store, cfg)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn fourier_norm_and_determinism() {
        let (store, cfg) = setup();
        let g = store.get(PE_GAUSSIAN).unwrap();
        let a = fourier_pe(g, 0.3, 0.7).unwrap();
        assert_eq!(a, fourier_pe(g, 0.3, 0.7).unwrap());
        for (x, y) in [(0.0, 0.0), (1.0, 1.0), (0.25, 0.9)] {
            let v = fourier_pe(g, x, y).unwrap();
            let norm = v.iter().map(|z| z * z).sum::<f64>().sqrt();
            assert!((norm - (cfg.d as f64 / 2.0).sqrt()).abs() < 1e-12);
        }
        assert!(fourier_pe(g, 1.1, 0.0).is_err());
        assert!(fourier_pe(g, 0.0, -0.01).is_err());
    }

    #[test]
    fn fourier_locality() {
        let cfg = PromptConfig { d: 64, canvas: 64, mask_tokens: 2 };
        let mut store = ParamStore::new();
        init(&mut store, &cfg, &mut rng(1));
        let g = store.get(PE_GAUSSIAN).unwrap();
        let mut r = rng(2);
        let mut wins = 0;
        for _ in 0..1000 {
            let (x, y) = (r.random::<f64>(), r.random::<f64>());
            let near = ((x + 0.01 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0), (y + 0.01 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            let far = (r.random::<f64>(), r.random::<f64>());
            let base = fourier_pe(g, x, y).unwrap();
            let cn = cos(&base, &fourier_pe(g, near.0, near.1).unwrap());
            let cf = cos(&base, &fourier_pe(g, far.0, far.1).unwrap());
            if cn > cf {
                wins += 1;
            }
        }
        assert!(wins >= 950, "{wins}");
    }

    #[test]
    fn box_arity_and_whole_canvas_corners() {
        let (store, cfg) = setup();
        let g = store.get(PE_GAUSSIAN).unwrap().clone();
        let mut sess = Session::inference(&store);
        let b = PixelBox { x0: 0.0, y0: 0.0, x1: 64.0, y1: 64.0 };
        let t = encode(&mut sess, &cfg, &Prompt::Box(b)).unwrap();
        assert_eq!(sess.tape.shape(t.tokens), &[2, 16]);
        let got = sess.tape.value(t.tokens).clone();
        let tl = store.get(CORNER_TL).unwrap().data();
        let expect0: Vec<f64> = fourier_pe(&g, 0.0, 0.0).unwrap().iter().zip(tl).map(|(a, b)| a + b).collect();
        assert_eq!(got.row(0), &expect0[..]);
        let br = store.get(CORNER_BR).unwrap().data();
        let expect1: Vec<f64> = fourier_pe(&g, 1.0, 1.0).unwrap().iter().zip(br).map(|(a, b)| a + b).collect();
        assert_eq!(got.row(1), &expect1[..]);

        let p = encode(&mut sess, &cfg, &Prompt::Point(10.0, 20.0)).unwrap();
        assert_eq!(sess.tape.shape(p.tokens), &[1, 16]);
        let mut m = Tensor::zeros(&[64, 64]);
        m.data_mut()[64 * 10 + 10] = 1.0;
        let mt = encode(&mut sess, &cfg, &Prompt::Mask(m)).unwrap();
        assert_eq!(sess.tape.shape(mt.tokens), &[2, 16]);
    }

    #[test]
    fn distinct_boxes_distinct_tokens_and_degenerate_rejected() {
        let (store, cfg) = setup();
        let mut sess = Session::inference(&store);
        let a = encode(&mut sess, &cfg, &Prompt::Box(PixelBox { x0: 1.0, y0: 2.0, x1: 20.0, y1: 30.0 })).unwrap();
        let b = encode(&mut sess, &cfg, &Prompt::Box(PixelBox { x0: 1.0, y0: 2.0, x1: 21.0, y1: 30.0 })).unwrap();
        assert_ne!(sess.tape.value(a.tokens), sess.tape.value(b.tokens));
        let bad = PixelBox { x0: 5.0, y0: 5.0, x1: 5.0, y1: 9.0 };
        assert!(matches!(encode(&mut sess, &cfg, &Prompt::Box(bad)), Err(Error::Contract(_))));
        let out = PixelBox { x0: 5.0, y0: 5.0, x1: 65.0, y1: 9.0 };
        assert!(encode(&mut sess, &cfg, &Prompt::Box(out)).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let (store, cfg) = setup();
        assert_eq!(store.count_scalars("prompt/"), param_count(&cfg));
    }
}
