//! PSNR, SSIM and MAE.

use ndarray::{s, Array2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure_same_dim, invalid, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in dB, or a marker for a zero-error pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Identical => None,
        }
    }

    /// Treat `Identical` as infinitely good, for orderings.
    pub fn as_f64(&self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr::Db(v)),
            Repr::Tag(t) if t == "identical" => Ok(Psnr::Identical),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("unknown psnr value {t:?}"))),
        }
    }
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    if a.is_empty() {
        return Err(invalid("image", "empty"));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(invalid("peak", format!("{peak} must be positive")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (peak * peak / m).log10())
    })
}

pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    if a.is_empty() {
        return Err(invalid("image", "empty"));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = taps.len();
    let rows = Array2::from_shape_fn((h, w - k + 1), |(r, c)| (0..k).map(|j| taps[j] * x[[r, c + j]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(r, c)| (0..k).map(|i| taps[i] * rows[[r + i, c]]).sum())
}

/// Mean SSIM with dynamic range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid("image", format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a), &taps);
    let bb = filter_valid(&(b * b), &taps);
    let ab = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Psnr,
    pub ssim: f64,
    pub mae: f64,
}

/// Per-channel metrics averaged over channels. PSNR averages the per-channel
/// dB values and is `Identical` only when every channel is.
pub fn compare(reference: &[Array2<f64>], test: &[Array2<f64>], peak: f64) -> Result<MetricReport> {
    if reference.is_empty() || reference.len() != test.len() {
        return Err(invalid("channels", format!("{} reference vs {} test channels", reference.len(), test.len())));
    }
    let n = reference.len() as f64;
    let mut dbs = Vec::new();
    let (mut s, mut m) = (0.0, 0.0);
    for (r, t) in reference.iter().zip(test) {
        if let Psnr::Db(v) = psnr(r, t, peak)? {
            dbs.push(v);
        }
        s += ssim(r, t)?;
        m += mae(r, t)?;
    }
    let psnr_db = if dbs.is_empty() {
        Psnr::Identical
    } else {
        Psnr::Db(dbs.iter().sum::<f64>() / dbs.len() as f64)
    };
    Ok(MetricReport {
        psnr_db,
        ssim: s / n,
        mae: m / n,
    })
}

/// Least-squares gain `g` minimizing `||reference - g * test||` over all
/// channels; 1 when the test image is all zero.
pub fn fit_gain(reference: &[Array2<f64>], test: &[Array2<f64>]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (r, t) in reference.iter().zip(test) {
        ensure_same_dim(r.dim(), t.dim())?;
        num += r.iter().zip(t.iter()).map(|(x, y)| x * y).sum::<f64>();
        den += t.iter().map(|y| y * y).sum::<f64>();
    }
    Ok(if den > 0.0 { num / den } else { 1.0 })
}

/// Metrics on columns `[c0, c1)` after fitting a gain on that region.
pub fn compare_region(reference: &[Array2<f64>], test: &[Array2<f64>], cols: (usize, usize), peak: f64) -> Result<MetricReport> {
    let crop = |imgs: &[Array2<f64>]| -> Result<Vec<Array2<f64>>> {
        imgs.iter()
            .map(|im| {
                if cols.0 >= cols.1 || cols.1 > im.ncols() {
                    return Err(invalid("region", format!("columns {cols:?} outside width {}", im.ncols())));
                }
                Ok(im.slice(s![.., cols.0..cols.1]).to_owned())
            })
            .collect()
    };
    let r = crop(reference)?;
    let t = crop(test)?;
    let g = fit_gain(&r, &t)?;
    let t: Vec<Array2<f64>> = t.into_iter().map(|x| x * g).collect();
    compare(&r, &t, peak)
}
