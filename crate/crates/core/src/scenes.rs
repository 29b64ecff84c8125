//! Built-in synthetic test charts.
//!
//! The dual-depth scene puts a textured "toy" in the left part of the frame
//! and a high-contrast "OU" glyph chart in the right part, so each layer can
//! be scored on its own region.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Desk-scale frame used by the bundled experiments.
pub const DESK_DIM: (usize, usize) = (128, 156);

/// Column ranges `[start, end)` of the toy and glyph regions.
pub fn regions(nx: usize) -> ((usize, usize), (usize, usize)) {
    let split = nx / 2;
    ((0, split), (split, nx))
}

/// White "OU" on black inside the right region, one channel.
pub fn ou_glyphs(ny: usize, nx: usize) -> Result<Array2<f64>> {
    if ny < 16 || nx < 16 {
        return Err(invalid("dim", format!("{ny}x{nx} too small for glyphs")));
    }
    let (_, (x0, x1)) = regions(nx);
    let w = (x1 - x0) as f64;
    let h = ny as f64;
    let stroke = (w * 0.09).max(2.0);
    // letter boxes: width 0.38 w, height 0.5 h, centered vertically
    let lw = 0.38 * w;
    let lh = 0.5 * h;
    let top = (h - lh) / 2.0;
    let gap = (w - 2.0 * lw) / 3.0;
    let o_left = x0 as f64 + gap;
    let u_left = o_left + lw + gap;

    let mut img = Array2::zeros((ny, nx));
    for ((r, c), v) in img.indexed_iter_mut() {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        // O: elliptical ring
        let (cy, cx) = (top + lh / 2.0, o_left + lw / 2.0);
        let (ay, ax) = (lh / 2.0, lw / 2.0);
        let outer = ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2);
        let inner = ((y - cy) / (ay - stroke)).powi(2) + ((x - cx) / (ax - stroke)).powi(2);
        let in_o = outer <= 1.0 && inner > 1.0;
        // U: two bars above a half ring
        let (ux, uy_bend) = (u_left, top + lh - lw / 2.0);
        let in_bars = y >= top && y <= uy_bend && ((x >= ux && x < ux + stroke) || (x > ux + lw - stroke && x <= ux + lw));
        let (bcx, brad) = (ux + lw / 2.0, lw / 2.0);
        let dist = ((y - uy_bend).powi(2) + (x - bcx).powi(2)).sqrt();
        let in_bend = y > uy_bend && dist <= brad && dist > brad - stroke;
        if in_o || in_bars || in_bend {
            *v = 1.0;
        }
    }
    Ok(img)
}

/// Textured blob in the left region with per-channel tint. Values sit on the
/// 8-bit grid, like a bundled PNG asset.
pub fn plush_toy(ny: usize, nx: usize, channels: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    if ny < 16 || nx < 16 {
        return Err(invalid("dim", format!("{ny}x{nx} too small for toy")));
    }
    if channels == 0 {
        return Err(invalid("channels", "must be at least 1"));
    }
    let ((x0, x1), _) = regions(nx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let f = rng.gen_range(0.04..0.35);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let ph = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.3..1.0) / (1.0 + 8.0 * f);
            (f * th.cos(), f * th.sin(), ph, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();

    let cx = (x0 + x1) as f64 / 2.0;
    let head = (ny as f64 * 0.32, cx, ny as f64 * 0.16, (x1 - x0) as f64 * 0.26);
    let body = (ny as f64 * 0.66, cx, ny as f64 * 0.24, (x1 - x0) as f64 * 0.36);
    let shape = |y: f64, x: f64| -> f64 {
        let e = |(cy, cx, ay, ax): (f64, f64, f64, f64)| ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2);
        let d = e(head).min(e(body));
        // soft edge over about one pixel
        (1.0 - (d.sqrt() - 1.0) * 8.0).clamp(0.0, 1.0)
    };
    let tint = [0.95, 0.7, 0.45];
    let base = Array2::from_shape_fn((ny, nx), |(r, c)| {
        let (y, x) = (r as f64, c as f64);
        let m = shape(y, x);
        if m == 0.0 {
            return 0.0;
        }
        let tex: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (fy * y + fx * x + ph).cos()).sum::<f64>() / norm;
        m * (0.6 + 0.35 * tex)
    });
    Ok((0..channels)
        .map(|k| base.mapv(|v| ((v * tint[k % tint.len()]).clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect())
}
