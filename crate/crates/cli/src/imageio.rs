use std::path::Path;

use image::{Rgb, RgbImage};
use sca_core::metrics::Distribution;
use sca_core::numerics::Tensor;

use crate::CliError;

/// Reads an 8-bit RGB PNG as an `H × W × 3` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor, CliError> {
    let img = image::open(path).map_err(|e| CliError::Input(format!("cannot read image {}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

pub fn write_png(t: &Tensor, path: &Path) -> Result<(), CliError> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([px(t.data()[i]), px(t.data()[i + 1]), px(t.data()[i + 2])])
    });
    save(&img, path)
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

const BAR: u32 = 16;
const HEIGHT: u32 = 160;
const MARGIN: u32 = 8;

/// Bar chart of the histogram counts with a baseline.
pub fn write_histogram(d: &Distribution, path: &Path) -> Result<(), CliError> {
    let bins = d.counts.len() as u32;
    let (w, h) = (bins * BAR + 2 * MARGIN, HEIGHT + 2 * MARGIN);
    let peak = d.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (i, &c) in d.counts.iter().enumerate() {
        let bar_h = ((c as f64 / peak) * HEIGHT as f64).round() as u32;
        let x0 = MARGIN + i as u32 * BAR;
        for x in x0 + 1..x0 + BAR - 1 {
            for y in MARGIN + HEIGHT - bar_h..MARGIN + HEIGHT {
                img.put_pixel(x, y, Rgb([40, 80, 160]));
            }
        }
    }
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, MARGIN + HEIGHT, Rgb([0, 0, 0]));
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_byte_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let t = Tensor::new(vec![4, 3, 3], data).unwrap();
        let p = dir.path().join("x.png");
        write_png(&t, &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), t);
    }

    #[test]
    fn histogram_has_expected_size() {
        let d = sca_core::metrics::distribution_report(&[0.0, 0.0, 1.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        write_histogram(&d, &p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!(img.width(), d.counts.len() as u32 * BAR + 2 * MARGIN);
    }
}
