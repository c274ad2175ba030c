//! Procedural scenes of colored shapes with per-object masks, boxes, class
//! labels and grammar captions.

pub mod dataset;
pub mod grammar;
pub mod lsj;

pub use dataset::{build_corpus, export_dataset, import_dataset, manifest_count, Corpus, CorpusKind};
pub use lsj::lsj_augment;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::vocab::{Vocabulary, EOS};
use crate::numerics::Tensor;

/// Regions smaller than this are treated as destroyed.
pub const MIN_REGION_AREA: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Area of the continuous shape with half-extent `r`.
    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::PI * r * r,
            ShapeKind::Square => 4.0 * r * r,
            ShapeKind::Triangle => 2.0 * r * r,
        }
    }

    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            ShapeKind::Circle => 2.0 * std::f64::consts::PI * r,
            ShapeKind::Square => 8.0 * r,
            ShapeKind::Triangle => 2.0 * r + 2.0 * (r * r + 4.0 * r * r).sqrt(),
        }
    }

    /// Whether the point `(px, py)` lies inside the shape centered at
    /// `(cx, cy)`. Triangles point up with their base on the bottom edge.
    pub fn contains(self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        match self {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            ShapeKind::Triangle => {
                let top = cy - r;
                py >= top && py <= cy + r && (px - cx).abs() <= (py - top) / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: [f64; 3],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub palette: Vec<PaletteColor>,
    pub shape_weights: [f64; 3],
    /// Half-extent ranges in pixels for small and large objects.
    pub small_radius: (f64, f64),
    pub large_radius: (f64, f64),
    pub large_fraction: f64,
    /// Minimum gap between object bounding boxes.
    pub spacing: f64,
    pub noise: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let color = |name: &str, rgb: [f64; 3], weight: f64| PaletteColor {
            name: name.to_string(),
            rgb,
            weight,
        };
        SceneConfig {
            canvas: 64,
            min_objects: 1,
            max_objects: 3,
            palette: vec![
                color("red", [0.9, 0.15, 0.15], 0.3),
                color("green", [0.15, 0.8, 0.2], 0.25),
                color("blue", [0.2, 0.3, 0.95], 0.2),
                color("yellow", [0.95, 0.9, 0.15], 0.15),
                color("purple", [0.6, 0.2, 0.8], 0.1),
            ],
            shape_weights: [1.0, 1.0, 1.0],
            small_radius: (5.0, 7.0),
            large_radius: (8.0, 11.0),
            large_fraction: 0.5,
            spacing: 3.0,
            noise: 0.03,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 16 {
            return Err(Error::config("canvas must be at least 16 px"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range must satisfy 1 <= min <= max"));
        }
        if self.palette.is_empty() || self.palette.iter().any(|c| c.weight <= 0.0) {
            return Err(Error::config("palette needs at least one color with positive weight"));
        }
        if self.shape_weights.iter().any(|&w| w < 0.0) || self.shape_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("shape weights must be non-negative and not all zero"));
        }
        let (lo, hi) = self.large_radius;
        if self.small_radius.0 < 1.5 || self.small_radius.0 > self.small_radius.1 || lo > hi {
            return Err(Error::config("radius ranges must be ordered and at least 1.5 px"));
        }
        if 2.0 * hi + 2.0 >= self.canvas as f64 {
            return Err(Error::config("objects do not fit on the canvas"));
        }
        Ok(())
    }

    pub fn color_probabilities(&self) -> Vec<f64> {
        let total: f64 = self.palette.iter().map(|c| c.weight).sum();
        self.palette.iter().map(|c| c.weight / total).collect()
    }

    pub fn shape_probabilities(&self) -> [f64; 3] {
        let total: f64 = self.shape_weights.iter().sum();
        self.shape_weights.map(|w| w / total)
    }

    pub fn color_names(&self) -> Vec<String> {
        self.palette.iter().map(|c| c.name.clone()).collect()
    }

    /// Vocabulary covering every word the grammar can produce.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(grammar::lexicon(&self.color_names()).keys())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub kind: ShapeKind,
    pub color: usize,
    pub size: SizeClass,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Object {
    /// Pixel-space bounds of the shape's continuous extent.
    fn extent(&self) -> [f64; 4] {
        [self.cx - self.radius, self.cy - self.radius, self.cx + self.radius, self.cy + self.radius]
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    /// `H × W × 3` with values in `[0, 1]`.
    pub image: Arc<Tensor>,
    pub objects: Vec<Object>,
    palette: Vec<String>,
}

impl Scene {
    pub fn color_name(&self, o: &Object) -> &str {
        &self.palette[o.color]
    }

    pub fn canvas(&self) -> usize {
        self.image.shape()[0]
    }

    /// Binary `H × W` rasterization sampled at pixel centers.
    pub fn rasterize(&self, index: usize) -> Tensor {
        let n = self.canvas();
        let o = &self.objects[index];
        let mut mask = Tensor::zeros(&[n, n]);
        let m = mask.data_mut();
        for y in 0..n {
            for x in 0..n {
                if o.kind.contains(o.cx, o.cy, o.radius, x as f64 + 0.5, y as f64 + 0.5) {
                    m[y * n + x] = 1.0;
                }
            }
        }
        mask
    }
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.canvas;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let color_weights: Vec<f64> = config.palette.iter().map(|c| c.weight).collect();

    let mut objects: Vec<Object> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[pick(&config.shape_weights, &mut rng)];
        let color = pick(&color_weights, &mut rng);
        let mut size = if rng.random::<f64>() < config.large_fraction {
            SizeClass::Large
        } else {
            SizeClass::Small
        };
        // A large object that does not fit is retried once as a small one.
        let mut placed = None;
        loop {
            let (lo, hi) = match size {
                SizeClass::Small => config.small_radius,
                SizeClass::Large => config.large_radius,
            };
            let radius = rng.random_range(lo..=hi);
            for _ in 0..config.max_retries {
                let cx = rng.random_range(radius + 1.0..=n as f64 - radius - 1.0);
                let cy = rng.random_range(radius + 1.0..=n as f64 - radius - 1.0);
                let cand = Object { kind, color, size, cx, cy, radius };
                let e = cand.extent();
                let clear = objects.iter().all(|o| {
                    let f = o.extent();
                    e[0] > f[2] + config.spacing
                        || f[0] > e[2] + config.spacing
                        || e[1] > f[3] + config.spacing
                        || f[1] > e[3] + config.spacing
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            if placed.is_some() || size == SizeClass::Small {
                break;
            }
            size = SizeClass::Small;
        }
        let obj = placed.ok_or_else(|| {
            Error::Generation(format!(
                "seed {seed}: could not place object {} of {count} after {} tries",
                objects.len() + 1,
                config.max_retries
            ))
        })?;
        objects.push(obj);
    }

    let mut img = vec![0.0; n * n * 3];
    let bg = 0.12 + 0.08 * rng.random::<f64>();
    for px in img.chunks_mut(3) {
        for c in px.iter_mut() {
            *c = bg + config.noise * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    for o in &objects {
        let rgb = config.palette[o.color].rgb;
        for y in 0..n {
            for x in 0..n {
                if o.kind.contains(o.cx, o.cy, o.radius, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img[(y * n + x) * 3 + c] = rgb[c] + config.noise * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Scene {
        seed,
        image: Arc::new(Tensor::from_parts(vec![n, n, 3], img)),
        objects,
        palette: config.color_names(),
    })
}

/// Pixel box `(x0, y0, x1, y1)` with exclusive upper corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct RegionSample {
    pub scene_seed: u64,
    pub object_index: usize,
    pub image: Arc<Tensor>,
    pub bbox: PixelBox,
    /// Integer pixel coordinates `(x, y)` of a pixel inside the mask.
    pub point: (usize, usize),
    pub mask: Tensor,
    pub label: Vec<u32>,
    pub caption: Vec<u32>,
}

impl RegionSample {
    pub fn mask_area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Target sequence for the given supervision, terminated by EOS.
    pub fn target(&self, kind: TargetKind) -> Vec<u32> {
        let mut t = match kind {
            TargetKind::Label => self.label.clone(),
            TargetKind::Caption => self.caption.clone(),
        };
        t.push(EOS);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Label,
    Caption,
}

/// Tight bounding box of a binary mask, or `None` when it is empty.
pub fn mask_bbox(mask: &Tensor) -> Option<PixelBox> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| PixelBox {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: x1 as f64,
        y1: y1 as f64,
    })
}

/// Mask pixel chosen uniformly by `rng`.
pub(crate) fn sample_point<R: Rng>(mask: &Tensor, rng: &mut R) -> Option<(usize, usize)> {
    let w = mask.shape()[1];
    let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] > 0.5).collect();
    if inside.is_empty() {
        return None;
    }
    let i = inside[rng.random_range(0..inside.len())];
    Some((i % w, i / w))
}

/// One region per object. Points are drawn from a stream derived from the
/// scene seed so the output is a function of the scene alone.
pub fn regions_of(scene: &Scene, vocab: &Vocabulary) -> Vec<RegionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..scene.objects.len())
        .map(|i| {
            let mask = scene.rasterize(i);
            let bbox = mask_bbox(&mask).expect("placed objects always rasterize");
            let point = sample_point(&mask, &mut rng).expect("non-empty mask");
            let obj = &scene.objects[i];
            RegionSample {
                scene_seed: scene.seed,
                object_index: i,
                image: Arc::clone(&scene.image),
                bbox,
                point,
                mask,
                label: vocab.tokenize(&grammar::class_label(scene, obj).join(" ")),
                caption: vocab.tokenize(&grammar::caption(scene, i).join(" ")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
