//! Large-scale jittering: rescale by a random factor, then crop or pad back
//! to the original canvas.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mask_bbox, RegionSample, MIN_REGION_AREA};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Geometry of one jitter draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    /// Resized extent (square canvas).
    pub resized: usize,
    /// Offset of the output window inside the resized image; negative when
    /// the resized image is padded.
    pub offset_x: i64,
    pub offset_y: i64,
}

impl Jitter {
    pub fn draw(canvas: usize, scale_min: f64, scale_max: f64, seed: u64) -> Result<Self> {
        if !(scale_min > 0.0 && scale_min <= scale_max && scale_max.is_finite()) {
            return Err(Error::config(format!(
                "jitter range must satisfy 0 < min <= max, got ({scale_min}, {scale_max})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = if scale_min == scale_max {
            scale_min
        } else {
            rng.random_range(scale_min..=scale_max)
        };
        let resized = ((canvas as f64 * scale).round() as usize).max(1);
        let mut offset = || -> i64 {
            let slack = resized as i64 - canvas as i64;
            if slack >= 0 {
                rng.random_range(0..=slack)
            } else {
                -rng.random_range(0..=-slack)
            }
        };
        let offset_x = offset();
        let offset_y = offset();
        Ok(Jitter { scale, resized, offset_x, offset_y })
    }

    /// Source coordinate (in resized pixels) of output pixel `o` along an axis.
    fn resized_index(&self, o: usize, offset: i64) -> Option<usize> {
        let r = o as i64 + offset;
        (r >= 0 && (r as usize) < self.resized).then_some(r as usize)
    }

    fn src_scale(&self, canvas: usize) -> f64 {
        self.resized as f64 / canvas as f64
    }
}

fn resample_image(image: &Tensor, j: &Jitter) -> Tensor {
    let n = image.shape()[0];
    let s = j.src_scale(n);
    let src = image.data();
    let mut out = vec![0.0; n * n * 3];
    for y in 0..n {
        let Some(ry) = j.resized_index(y, j.offset_y) else { continue };
        let fy = ((ry as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(n - 1);
        let wy = fy - y0 as f64;
        for x in 0..n {
            let Some(rx) = j.resized_index(x, j.offset_x) else { continue };
            let fx = ((rx as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(n - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src[(yy * n + xx) * 3 + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[(y * n + x) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::from_parts(vec![n, n, 3], out)
}

fn resample_mask(mask: &Tensor, j: &Jitter) -> Tensor {
    let n = mask.shape()[0];
    let s = j.src_scale(n);
    let mut out = vec![0.0; n * n];
    let src_of = |r: usize| (((r as f64 + 0.5) / s).floor() as usize).min(n - 1);
    for y in 0..n {
        let Some(ry) = j.resized_index(y, j.offset_y) else { continue };
        for x in 0..n {
            let Some(rx) = j.resized_index(x, j.offset_x) else { continue };
            out[y * n + x] = mask.data()[src_of(ry) * n + src_of(rx)];
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Maps the prompt point through the jitter and snaps it to the nearest
/// mask pixel when resampling moved it off the region.
fn transform_point(point: (usize, usize), mask: &Tensor, j: &Jitter) -> Option<(usize, usize)> {
    let n = mask.shape()[0];
    let s = j.src_scale(n);
    let fx = (point.0 as f64 + 0.5) * s - 0.5 - j.offset_x as f64;
    let fy = (point.1 as f64 + 0.5) * s - 0.5 - j.offset_y as f64;
    let (px, py) = (fx.round(), fy.round());
    if px >= 0.0 && py >= 0.0 && (px as usize) < n && (py as usize) < n {
        let (x, y) = (px as usize, py as usize);
        if mask.data()[y * n + x] > 0.5 {
            return Some((x, y));
        }
    }
    (0..n * n)
        .filter(|&i| mask.data()[i] > 0.5)
        .map(|i| (i % n, i / n))
        .min_by(|a, b| {
            let da = (a.0 as f64 - fx).powi(2) + (a.1 as f64 - fy).powi(2);
            let db = (b.0 as f64 - fx).powi(2) + (b.1 as f64 - fy).powi(2);
            da.total_cmp(&db)
        })
}

/// Applies one jitter draw to a region. Returns `None` when the visible part
/// of the region falls below [`MIN_REGION_AREA`]; callers drop those.
pub fn lsj_augment(sample: &RegionSample, scale_min: f64, scale_max: f64, seed: u64) -> Result<Option<RegionSample>> {
    let n = sample.image.shape()[0];
    let j = Jitter::draw(n, scale_min, scale_max, seed)?;
    Ok(apply(sample, &j))
}

pub fn apply(sample: &RegionSample, j: &Jitter) -> Option<RegionSample> {
    let mask = resample_mask(&sample.mask, j);
    let area = mask.data().iter().filter(|&&v| v > 0.5).count();
    if area < MIN_REGION_AREA {
        return None;
    }
    let bbox = mask_bbox(&mask)?;
    let point = transform_point(sample.point, &mask, j)?;
    Some(RegionSample {
        image: Arc::new(resample_image(&sample.image, j)),
        bbox,
        point,
        mask,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, regions_of, SceneConfig};

    fn samples() -> Vec<RegionSample> {
        let cfg = SceneConfig::default();
        let vocab = cfg.vocabulary();
        (0..20)
            .flat_map(|s| regions_of(&generate_scene(s, &cfg).unwrap(), &vocab))
            .collect()
    }

    #[test]
    fn unit_scale_is_identity() {
        for s in samples().iter().take(5) {
            let out = lsj_augment(s, 1.0, 1.0, 3).unwrap().unwrap();
            assert_eq!(out.image.data(), s.image.data());
            assert_eq!(out.mask, s.mask);
            assert_eq!(out.bbox, s.bbox);
            assert_eq!(out.point, s.point);
        }
    }

    #[test]
    fn invalid_range_is_config_error() {
        let s = &samples()[0];
        assert!(matches!(lsj_augment(s, 0.0, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(lsj_augment(s, 2.0, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn point_stays_inside_mask_over_many_trials() {
        let all = samples();
        let mut survived = 0;
        for trial in 0..1000u64 {
            let s = &all[trial as usize % all.len()];
            if let Some(out) = lsj_augment(s, 0.1, 2.0, trial).unwrap() {
                survived += 1;
                let n = out.mask.shape()[1];
                assert_eq!(out.mask.data()[out.point.1 * n + out.point.0], 1.0);
                let b = out.bbox;
                assert!(b.x0 < b.x1 && b.y0 < b.y1);
                assert_eq!(mask_bbox(&out.mask), Some(b));
            }
        }
        assert!(survived > 300, "only {survived} regions survived");
    }

    #[test]
    fn downscale_pads_with_zeros() {
        let s = &samples()[0];
        let j = Jitter { scale: 0.5, resized: 32, offset_x: -10, offset_y: -10 };
        let out_img = resample_image(&s.image, &j);
        assert_eq!(out_img.get(&[0, 0, 0]), 0.0);
        assert_eq!(out_img.get(&[63, 63, 2]), 0.0);
        assert!(out_img.get(&[20, 20, 0]) > 0.0);
    }
}
