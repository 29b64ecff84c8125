//! Lensless measurement formation.
//!
//! Each scene layer is convolved with the PSF for its depth, the layers are
//! summed incoherently and the result is cropped to the sensor window. Layers
//! are given in sensor-pixel coordinates; occlusion between layers is not
//! modeled.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dim, invalid, Error, Result};
use crate::fft::Fft2;
use crate::optics::Psf;

/// Full linear convolution, `(Hi + Hk - 1) x (Wi + Wk - 1)`.
pub fn convolve_fft(image: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let (hi, wi) = image.dim();
    let (hk, wk) = kernel.dim();
    if hi == 0 || wi == 0 || hk == 0 || wk == 0 {
        return Err(invalid("convolve_fft", "empty input"));
    }
    let full = (hi + hk - 1, wi + wk - 1);
    let plan = Fft2::new(full.0, full.1);
    let a = plan.forward_real(&embed(image, full, (0, 0)));
    let b = plan.forward_real(&embed(kernel, full, (0, 0)));
    Ok(plan.inverse_real(&(a * b)))
}

/// Zero-embed `src` into a `dim` grid at `offset`.
pub fn embed(src: &Array2<f64>, dim: (usize, usize), offset: (usize, usize)) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros(dim);
    out.slice_mut(s![offset.0..offset.0 + h, offset.1..offset.1 + w]).assign(src);
    out
}

/// Offset of a centered `inner` window inside `outer`; the extra row or
/// column of an odd difference lands on the high-index side.
pub fn center_offset(outer: (usize, usize), inner: (usize, usize)) -> (usize, usize) {
    ((outer.0 - inner.0) / 2, (outer.1 - inner.1) / 2)
}

pub fn crop_center(full: &Array2<f64>, ny: usize, nx: usize) -> Result<Array2<f64>> {
    let (h, w) = full.dim();
    if ny > h || nx > w {
        return Err(invalid("crop_center", format!("window {ny}x{nx} exceeds {h}x{w}")));
    }
    let (oy, ox) = center_offset((h, w), (ny, nx));
    Ok(full.slice(s![oy..oy + ny, ox..ox + nx]).to_owned())
}

/// Adjoint of [`crop_center`]: zero-pad a window back to `(h, w)`.
pub fn pad_adjoint(window: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    let (ny, nx) = window.dim();
    if ny > h || nx > w {
        return Err(invalid("pad_adjoint", format!("window {ny}x{nx} exceeds {h}x{w}")));
    }
    Ok(embed(window, (h, w), center_offset((h, w), (ny, nx))))
}

/// Crop-of-convolution operator `A` for a fixed PSF, scene size and sensor size.
pub struct ForwardOperator {
    scene: (usize, usize),
    sensor: (usize, usize),
    plan: Fft2,
    kernel_spectrum: Array2<Complex64>,
}

impl ForwardOperator {
    pub fn new(psf: &Psf, scene: (usize, usize), sensor: (usize, usize)) -> Result<Self> {
        let (hk, wk) = psf.dim();
        if scene.0 == 0 || scene.1 == 0 {
            return Err(invalid("scene", "empty scene grid"));
        }
        let full = (scene.0 + hk - 1, scene.1 + wk - 1);
        if sensor.0 == 0 || sensor.1 == 0 || sensor.0 > full.0 || sensor.1 > full.1 {
            return Err(invalid(
                "sensor",
                format!("{sensor:?} must be nonempty and fit the convolution output {full:?}"),
            ));
        }
        let plan = Fft2::new(full.0, full.1);
        let kernel_spectrum = plan.forward_real(&embed(psf.kernel(), full, (0, 0)));
        Ok(Self {
            scene,
            sensor,
            plan,
            kernel_spectrum,
        })
    }

    pub fn scene_dim(&self) -> (usize, usize) {
        self.scene
    }

    pub fn sensor_dim(&self) -> (usize, usize) {
        self.sensor
    }

    pub fn full_dim(&self) -> (usize, usize) {
        self.plan.shape()
    }

    pub fn apply(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        ensure_same_dim(self.scene, v.dim())?;
        let mut spec = self.plan.forward_real(&embed(v, self.full_dim(), (0, 0)));
        spec *= &self.kernel_spectrum;
        crop_center(&self.plan.inverse_real(&spec), self.sensor.0, self.sensor.1)
    }

    pub fn adjoint(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        ensure_same_dim(self.sensor, b.dim())?;
        let (fy, fx) = self.full_dim();
        let mut spec = self.plan.forward_real(&pad_adjoint(b, fy, fx)?);
        spec.zip_mut_with(&self.kernel_spectrum, |y, k| *y *= k.conj());
        // correlation never wraps into the scene support
        Ok(self.plan.inverse_real(&spec).slice(s![..self.scene.0, ..self.scene.1]).to_owned())
    }
}

pub fn forward_apply(v: &Array2<f64>, psf: &Psf, sensor: (usize, usize)) -> Result<Array2<f64>> {
    ForwardOperator::new(psf, v.dim(), sensor)?.apply(v)
}

pub fn forward_adjoint(b: &Array2<f64>, psf: &Psf, scene: (usize, usize)) -> Result<Array2<f64>> {
    ForwardOperator::new(psf, scene, b.dim())?.adjoint(b)
}

/// One planar scene layer; `channels` holds one image per color channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub depth_cm: f64,
    pub channels: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    layers: Vec<Layer>,
}

impl Scene {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid("layers", "scene needs at least one layer"))?;
        let n_channels = first.channels.len();
        if n_channels == 0 {
            return Err(invalid("channels", "layer has no channels"));
        }
        let dim = first.channels[0].dim();
        for (i, layer) in layers.iter().enumerate() {
            if !(layer.depth_cm > 0.0 && layer.depth_cm.is_finite()) {
                return Err(invalid("depth_cm", format!("layer {i}: {} must be positive", layer.depth_cm)));
            }
            if layers[..i].iter().any(|l| l.depth_cm == layer.depth_cm) {
                return Err(invalid("depth_cm", format!("layer {i}: duplicate depth {}", layer.depth_cm)));
            }
            if layer.channels.len() != n_channels {
                return Err(invalid("channels", format!("layer {i} has {} channels, expected {n_channels}", layer.channels.len())));
            }
            for ch in &layer.channels {
                ensure_same_dim(dim, ch.dim())?;
                if ch.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(invalid("intensity", format!("layer {i} has negative or non-finite values")));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dim(&self) -> (usize, usize) {
        self.layers[0].channels[0].dim()
    }

    pub fn n_channels(&self) -> usize {
        self.layers[0].channels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorMeasurement {
    pub channels: Vec<Array2<f64>>,
    pub bit_depth: u8,
}

impl SensorMeasurement {
    pub fn new(channels: Vec<Array2<f64>>) -> Result<Self> {
        let first = channels.first().ok_or_else(|| invalid("channels", "measurement needs a channel"))?;
        for ch in &channels {
            ensure_same_dim(first.dim(), ch.dim())?;
            if ch.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid("measurement", "values must be finite and nonnegative"));
            }
        }
        Ok(Self { channels, bit_depth: 16 })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    pub fn max(&self) -> f64 {
        self.channels.iter().flat_map(|c| c.iter()).fold(0.0, |m, v| m.max(*v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Additive white Gaussian noise, clipped at zero.
    Gaussian { sigma: f64 },
    /// Photon noise: `Poisson(b * scale) / scale`.
    Poisson { scale: f64 },
}

impl NoiseModel {
    fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(invalid("gaussian_sigma", format!("{sigma} must be nonnegative")))
            }
            NoiseModel::Poisson { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(invalid("poisson_scale", format!("{scale} must be positive")))
            }
            _ => Ok(()),
        }
    }

    fn apply(&self, clean: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        match *self {
            NoiseModel::Gaussian { sigma } => {
                let normal = Normal::new(0.0, sigma).expect("validated sigma");
                clean.mapv(|v| (v + normal.sample(rng)).max(0.0))
            }
            NoiseModel::Poisson { scale } => clean.mapv(|v| {
                let lambda = v * scale;
                if lambda <= 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).expect("positive rate").sample(rng) / scale
                }
            }),
        }
    }
}

fn psf_for_depth(psfs: &[Psf], depth_cm: f64) -> Result<&Psf> {
    psfs.iter()
        .find(|p| (p.depth_cm - depth_cm).abs() <= 1e-9 * depth_cm.abs().max(1.0))
        .ok_or(Error::MissingPsf(depth_cm))
}

/// Synthesize `crop[sum_z h_z * v_z]` per channel, optionally with noise.
///
/// Noise is drawn from a ChaCha stream seeded with `seed`, one stream per
/// channel, so channel order does not affect the samples.
pub fn capture(
    scene: &Scene,
    psfs: &[Psf],
    sensor: (usize, usize),
    noise: Option<NoiseModel>,
    seed: u64,
) -> Result<SensorMeasurement> {
    if let Some(n) = &noise {
        n.validate()?;
    }
    let operators = scene
        .layers()
        .iter()
        .map(|layer| ForwardOperator::new(psf_for_depth(psfs, layer.depth_cm)?, scene.dim(), sensor))
        .collect::<Result<Vec<_>>>()?;

    let mut channels = Vec::with_capacity(scene.n_channels());
    for c in 0..scene.n_channels() {
        let mut acc = Array2::zeros(sensor);
        for (layer, op) in scene.layers().iter().zip(&operators) {
            acc += &op.apply(&layer.channels[c])?;
        }
        // FFT round-off can leave tiny negatives
        acc.mapv_inplace(|v: f64| v.max(0.0));
        if let Some(n) = &noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            acc = n.apply(&acc, &mut rng);
        }
        channels.push(acc);
    }
    SensorMeasurement::new(channels)
}
