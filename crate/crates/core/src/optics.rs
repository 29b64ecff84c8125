//! Geometric PSF simulation and MTF analysis.
//!
//! A point source at distance `z` in front of the mask casts the mask's
//! shadow onto the sensor `d` behind it, magnified about the optical axis by
//! `(z + d) / z`. Diffraction is not modeled.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dim, invalid, Error, Result};
use crate::fft::Fft2;
use crate::mask::MaskImage;

/// Shadow magnification for a source `depth_cm` in front of a mask placed
/// `mask_sensor_dist_mm` from the sensor.
pub fn magnification(depth_cm: f64, mask_sensor_dist_mm: f64) -> Result<f64> {
    if !(depth_cm > 0.0 && depth_cm.is_finite()) {
        return Err(invalid("depth_cm", format!("{depth_cm} must be positive")));
    }
    if !(mask_sensor_dist_mm > 0.0 && mask_sensor_dist_mm.is_finite()) {
        return Err(invalid("mask_sensor_dist_mm", format!("{mask_sensor_dist_mm} must be positive")));
    }
    let z_mm = depth_cm * 10.0;
    Ok((z_mm + mask_sensor_dist_mm) / z_mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub ny: usize,
    pub nx: usize,
    pub pitch_um: f64,
}

impl SensorGeometry {
    pub fn new(ny: usize, nx: usize, pitch_um: f64) -> Result<Self> {
        if ny == 0 || nx == 0 {
            return Err(Error::DegenerateGrid { ny, nx, min: 1 });
        }
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(invalid("pitch_um", format!("{pitch_um} must be positive")));
        }
        Ok(Self { ny, nx, pitch_um })
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }
}

/// Unit-sum nonnegative kernel for one source depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    kernel: Array2<f64>,
    pub depth_cm: f64,
    pub mag: f64,
}

impl Psf {
    /// Normalize `kernel` to unit sum.
    pub fn new(kernel: Array2<f64>, depth_cm: f64, mag: f64) -> Result<Self> {
        if kernel.is_empty() {
            return Err(invalid("kernel", "empty"));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("kernel", "values must be finite and nonnegative"));
        }
        let total = kernel.sum();
        if total <= 0.0 {
            return Err(Error::ZeroKernel);
        }
        Ok(Self {
            kernel: kernel / total,
            depth_cm,
            mag,
        })
    }

    /// Single centered unit impulse on an `ny x nx` grid.
    pub fn impulse(ny: usize, nx: usize) -> Self {
        let mut kernel = Array2::zeros((ny, nx));
        kernel[[(ny - 1) / 2, (nx - 1) / 2]] = 1.0;
        Self {
            kernel,
            depth_cm: f64::INFINITY,
            mag: 1.0,
        }
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn dim(&self) -> (usize, usize) {
        self.kernel.dim()
    }
}

fn bilinear(grid: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (ny, nx) = grid.dim();
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= ny as f64 || c >= nx as f64 {
            0.0
        } else {
            grid[[r as usize, c as usize]]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1.0))
        + fr * ((1.0 - fc) * at(r0 + 1.0, c0) + fc * at(r0 + 1.0, c0 + 1.0))
}

/// Project the shadow of `mask` onto the sensor for a point source at `depth_cm`.
pub fn project_psf(mask: &MaskImage, depth_cm: f64, mask_sensor_dist_mm: f64, sensor: SensorGeometry) -> Result<Psf> {
    let mag = magnification(depth_cm, mask_sensor_dist_mm)?;
    let geometry = mask.geometry();
    let needed = mag * geometry.aperture_radius_px() * geometry.pitch_um;
    let available = sensor.ny.min(sensor.nx) as f64 / 2.0 * sensor.pitch_um;
    if needed > available * (1.0 + 1e-6) {
        return Err(Error::ShadowTooLarge { needed, available });
    }

    let (mcy, mcx) = geometry.center();
    let scy = (sensor.ny as f64 - 1.0) / 2.0;
    let scx = (sensor.nx as f64 - 1.0) / 2.0;
    // sensor pixels per mask pixel along each axis
    let step = sensor.pitch_um / (mag * geometry.pitch_um);
    let kernel = Array2::from_shape_fn(sensor.dim(), |(r, c)| {
        let mr = mcy + (r as f64 - scy) * step;
        let mc = mcx + (c as f64 - scx) * step;
        bilinear(&mask.grid, mr, mc)
    });
    Psf::new(kernel, depth_cm, mag)
}

/// Normalized DFT magnitude of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MtfSpectrum {
    /// Unshifted layout: `[0, 0]` is DC.
    pub values: Array2<f64>,
    pub dc_value_pre_norm: f64,
}

pub fn mtf(kernel: &Array2<f64>) -> Result<MtfSpectrum> {
    let (ny, nx) = kernel.dim();
    if ny == 0 || nx == 0 {
        return Err(invalid("kernel", "empty"));
    }
    let plan = Fft2::new(ny, nx);
    let spectrum = plan.forward_real(kernel);
    let dc = spectrum[[0, 0]].norm();
    if dc == 0.0 {
        return Err(Error::ZeroKernel);
    }
    let mut values = spectrum.mapv(|c| c.norm() / dc);
    values[[0, 0]] = 1.0;
    Ok(MtfSpectrum {
        values,
        dc_value_pre_norm: dc,
    })
}

impl MtfSpectrum {
    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Signed frequency index of DFT bin `k` on an axis of length `n`, as a
/// fraction of that axis' Nyquist frequency.
fn freq_fraction(k: usize, n: usize) -> f64 {
    let signed = if 2 * k <= n { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 / 2.0)
}

/// Annular average of an MTF from DC up to Nyquist.
///
/// Returns one `(bin_center, mean_mtf)` pair per bin with centers expressed
/// as fractions of the Nyquist frequency. Bins that contain no frequency
/// sample report a mean of 0; samples beyond Nyquist (grid corners) are ignored.
pub fn radial_mtf_profile(spectrum: &MtfSpectrum, n_bins: usize) -> Result<Vec<(f64, f64)>> {
    if n_bins < 2 {
        return Err(invalid("n_bins", format!("{n_bins} must be at least 2")));
    }
    let (ny, nx) = spectrum.values.dim();
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for ((r, c), v) in spectrum.values.indexed_iter() {
        let rho = freq_fraction(r, ny).hypot(freq_fraction(c, nx));
        if rho > 1.0 {
            continue;
        }
        let bin = ((rho * n_bins as f64) as usize).min(n_bins - 1);
        sums[bin] += v;
        counts[bin] += 1;
    }
    Ok((0..n_bins)
        .map(|b| {
            let center = (b as f64 + 0.5) / n_bins as f64;
            let mean = if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 };
            (center, mean)
        })
        .collect())
}

/// Mean absolute difference between two unit-sum kernels.
pub fn psf_scale_mae(a: &Psf, b: &Psf) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    let total: f64 = a.kernel.iter().zip(b.kernel.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.kernel.len() as f64)
}
