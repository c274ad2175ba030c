//! Aligned bilinear ROI pooling over a square token grid.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scenegen::PixelBox;

/// Interpolation weights of grid cells at continuous grid position `(y, x)`,
/// where cell `(i, j)` sits at exactly `(i, j)`. Points beyond one cell
/// outside the grid contribute nothing.
fn weights(g: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    let n = g as f64;
    if y < -1.0 || y > n || x < -1.0 || x > n {
        return Vec::new();
    }
    let axis = |v: f64| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= g - 1 {
            (g - 1, g - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y);
    let (x0, x1, lx) = axis(x);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * g + x0, hy * hx),
        (y0 * g + x1, hy * lx),
        (y1 * g + x0, ly * hx),
        (y1 * g + x1, ly * lx),
    ]
}

/// Bilinear sample of a `G²×D` grid.
pub fn bilinear(grid: &Tensor, y: f64, x: f64) -> Vec<f64> {
    let (cells, d) = grid.as_matrix();
    let g = (cells as f64).sqrt().round() as usize;
    let mut out = vec![0.0; d];
    for (cell, w) in weights(g, y, x) {
        if w != 0.0 {
            out.iter_mut().zip(grid.row(cell)).for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

/// Constant `out² × G²` matrix whose product with the grid gives the pooled
/// bins in row-major order. The sampling ratio adapts to the box size.
pub fn roi_sampling_matrix(g: usize, canvas: usize, region: &PixelBox, out: usize) -> Result<Tensor> {
    let n = canvas as f64;
    if region.x1 <= region.x0 || region.y1 <= region.y0 {
        return Err(Error::contract(format!("degenerate box {region:?}")));
    }
    if region.x0 < 0.0 || region.y0 < 0.0 || region.x1 > n || region.y1 > n {
        return Err(Error::contract(format!("box {region:?} outside the {canvas}px canvas")));
    }
    let scale = g as f64 / n;
    let (sx, sy) = (region.x0 * scale - 0.5, region.y0 * scale - 0.5);
    let (w, h) = ((region.x1 - region.x0) * scale, (region.y1 - region.y0) * scale);
    let (bw, bh) = (w / out as f64, h / out as f64);
    let rx = bw.ceil().max(1.0) as usize;
    let ry = bh.ceil().max(1.0) as usize;
    let norm = 1.0 / (rx * ry) as f64;
    let mut m = vec![0.0; out * out * g * g];
    for py in 0..out {
        for px in 0..out {
            let row = &mut m[(py * out + px) * g * g..(py * out + px + 1) * g * g];
            for iy in 0..ry {
                let y = sy + py as f64 * bh + (iy as f64 + 0.5) * bh / ry as f64;
                for ix in 0..rx {
                    let x = sx + px as f64 * bw + (ix as f64 + 0.5) * bw / rx as f64;
                    for (cell, wt) in weights(g, y, x) {
                        row[cell] += wt * norm;
                    }
                }
            }
        }
    }
    Tensor::new(vec![out * out, g * g], m)
}
