//! Radial mask optimization against the negated mean MTF.
//!
//! The loss of a section vector `raw` is
//!
//! ```text
//! h      = paint(sigmoid(raw))              (pixels outside the aperture are 0)
//! M_k    = sqrt(|DFT(h)_k|^2 + eps_mag)
//! loss   = -mean_k(M_k / M_0)
//! ```
//!
//! and its gradient is propagated back by hand through the DFT (whose
//! adjoint is an unnormalized inverse DFT), the section painting (whose
//! adjoint sums pixels per section) and the sigmoid.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::fft::Fft2;
use crate::mask::{MaskGeometry, RadialMaskParams, SectionMap, DEFAULT_APERTURE_FRACTION};

/// Total transmittance below which a mask counts as opaque.
pub const DC_THRESHOLD: f64 = 1e-9;

/// Sections whose transmittance falls inside this band count as non-binary.
pub const GRAY_BAND: (f64, f64) = (0.1, 0.9);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
    pub grid_ny: usize,
    pub grid_nx: usize,
    pub n_sections: usize,
    pub aperture_fraction: f64,
    pub eps_mag: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            init_low: -0.5,
            init_high: 0.5,
            seed: 0,
            grid_ny: 140,
            grid_nx: 140,
            n_sections: 70,
            aperture_fraction: DEFAULT_APERTURE_FRACTION,
            eps_mag: 1e-12,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be finite and nonnegative"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps_adam > 0.0) {
            return Err(invalid("eps_adam", "must be positive"));
        }
        if !(self.init_low < self.init_high) {
            return Err(invalid("init_low", "must be below init_high"));
        }
        if self.n_sections == 0 {
            return Err(invalid("n_sections", "must be positive"));
        }
        if !(self.eps_mag >= 0.0) {
            return Err(invalid("eps_mag", "must be nonnegative"));
        }
        self.geometry().validate()
    }

    pub fn geometry(&self) -> MaskGeometry {
        MaskGeometry {
            ny: self.grid_ny,
            nx: self.grid_nx,
            pitch_um: 1.0,
            aperture_fraction: self.aperture_fraction,
        }
    }
}

/// Negated smoothed mean MTF of an arbitrary nonnegative kernel.
pub fn grid_loss(kernel: &Array2<f64>, eps_mag: f64) -> Result<f64> {
    let (ny, nx) = kernel.dim();
    let plan = Fft2::new(ny, nx);
    let spectrum = plan.forward_real(kernel);
    let (loss, _) = loss_from_spectrum(&spectrum, kernel.sum(), eps_mag)?;
    Ok(loss)
}

fn loss_from_spectrum(spectrum: &Array2<Complex64>, total: f64, eps_mag: f64) -> Result<(f64, Array2<f64>)> {
    if !(total > DC_THRESHOLD) {
        return Err(Error::ZeroKernel);
    }
    let mags = spectrum.mapv(|c| (c.norm_sqr() + eps_mag).sqrt());
    let dc = mags[[0, 0]];
    let loss = -mags.sum() / (mags.len() as f64 * dc);
    Ok((loss, mags))
}

/// Loss and gradient evaluator for one grid and section count.
pub struct MtfObjective {
    map: SectionMap,
    plan: Fft2,
    eps_mag: f64,
}

impl MtfObjective {
    pub fn new(geometry: MaskGeometry, n_sections: usize, eps_mag: f64) -> Result<Self> {
        let map = SectionMap::new(geometry, n_sections)?;
        Ok(Self {
            plan: Fft2::new(geometry.ny, geometry.nx),
            map,
            eps_mag,
        })
    }

    pub fn from_config(cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg.geometry(), cfg.n_sections, cfg.eps_mag)
    }

    pub fn section_map(&self) -> &SectionMap {
        &self.map
    }

    fn check(&self, params: &RadialMaskParams) -> Result<()> {
        if params.n_sections() != self.map.n_sections() {
            return Err(invalid(
                "params",
                format!("{} sections, objective expects {}", params.n_sections(), self.map.n_sections()),
            ));
        }
        Ok(())
    }

    pub fn loss(&self, params: &RadialMaskParams) -> Result<f64> {
        self.check(params)?;
        let h = self.map.paint(&params.transmittance());
        let spectrum = self.plan.forward_real(&h);
        Ok(loss_from_spectrum(&spectrum, h.sum(), self.eps_mag)?.0)
    }

    /// Loss together with its gradient with respect to the raw section values.
    pub fn loss_and_gradient(&self, params: &RadialMaskParams) -> Result<(f64, Vec<f64>)> {
        self.check(params)?;
        let t = params.transmittance();
        let h = self.map.paint(&t);
        let total = h.sum();
        let spectrum = self.plan.forward_real(&h);
        let (loss, mags) = loss_from_spectrum(&spectrum, total, self.eps_mag)?;

        let n = self.plan.len() as f64;
        let dc = mags[[0, 0]];
        let mag_sum = mags.sum();
        // d M_k / d h_x summed over k, weighted 1: Re(ifft_unnormalized(H / M))
        let mut ratio = Array2::from_shape_fn(spectrum.dim(), |idx| spectrum[idx] / mags[idx]);
        self.plan.inverse(&mut ratio);
        // H_0 is the real total transmittance
        let dc_term = mag_sum * total / (dc * dc * dc);
        let d_pixels = ratio.mapv(|c| -(c.re / dc - dc_term) / n);

        let d_sections = self.map.gather(&d_pixels);
        let grad = d_sections
            .iter()
            .zip(&t)
            .map(|(g, ti)| g * ti * (1.0 - ti))
            .collect();
        Ok((loss, grad))
    }

    /// Mean transmittance over the aperture for section transmittances `t`.
    pub fn mean_transmittance(&self, t: &[f64]) -> f64 {
        let counts = self.map.pixel_counts();
        let total: usize = counts.iter().sum();
        let weighted: f64 = counts.iter().zip(t).map(|(c, v)| *c as f64 * v).sum();
        weighted / total.max(1) as f64
    }
}

pub fn loss(params: &RadialMaskParams, cfg: &OptimConfig) -> Result<f64> {
    MtfObjective::from_config(cfg)?.loss(params)
}

pub fn loss_gradient(params: &RadialMaskParams, cfg: &OptimConfig) -> Result<Vec<f64>> {
    Ok(MtfObjective::from_config(cfg)?.loss_and_gradient(params)?.1)
}

/// Fraction of sections whose transmittance lies outside [`GRAY_BAND`].
pub fn binarity_fraction(params: &RadialMaskParams) -> f64 {
    let t = params.transmittance();
    let binary = t.iter().filter(|v| **v < GRAY_BAND.0 || **v > GRAY_BAND.1).count();
    binary as f64 / t.len() as f64
}

#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, cfg: &OptimConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimTrace {
    /// Loss at the start of each epoch, before that epoch's update.
    pub losses: Vec<f64>,
    pub mean_transmittance: Vec<f64>,
    pub initial: RadialMaskParams,
    pub final_params: RadialMaskParams,
    pub final_loss: f64,
    pub final_mean_transmittance: f64,
    pub binarity_fraction: f64,
}

impl OptimTrace {
    /// Start indices of `window`-epoch windows in which the running minimum
    /// of the loss never improved.
    pub fn stalled_windows(&self, window: usize) -> Vec<usize> {
        let mut best = Vec::with_capacity(self.losses.len());
        let mut run = f64::INFINITY;
        for l in &self.losses {
            run = run.min(*l);
            best.push(run);
        }
        (0..self.losses.len().saturating_sub(window))
            .step_by(window)
            .filter(|&s| best[s + window] >= best[s])
            .collect()
    }

    /// Write the per-epoch trace as `epoch,loss,mean_transmittance`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "mean_transmittance"])?;
        for (i, (l, t)) in self.losses.iter().zip(&self.mean_transmittance).enumerate() {
            w.write_record([i.to_string(), l.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn initial_params(cfg: &OptimConfig) -> Result<RadialMaskParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = (0..cfg.n_sections)
        .map(|_| rng.gen_range(cfg.init_low..cfg.init_high))
        .collect();
    RadialMaskParams::new(raw)
}

/// Run Adam from a seeded uniform initialization.
pub fn optimize(cfg: &OptimConfig) -> Result<OptimTrace> {
    let objective = MtfObjective::from_config(cfg)?;
    let initial = initial_params(cfg)?;
    let mut raw = initial.raw_values().to_vec();
    let mut adam = Adam::new(raw.len(), cfg);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut mean_t = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let params = RadialMaskParams::new(raw.clone()).map_err(|_| Error::NonFinite {
            stage: "optimize: parameters",
            iteration: epoch,
        })?;
        let (l, grad) = objective.loss_and_gradient(&params)?;
        if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                stage: "optimize: loss",
                iteration: epoch,
            });
        }
        losses.push(l);
        mean_t.push(objective.mean_transmittance(&params.transmittance()));
        adam.step(&mut raw, &grad);
    }

    let final_params = RadialMaskParams::new(raw).map_err(|_| Error::NonFinite {
        stage: "optimize: parameters",
        iteration: cfg.epochs,
    })?;
    let final_loss = objective.loss(&final_params)?;
    Ok(OptimTrace {
        losses,
        mean_transmittance: mean_t,
        final_mean_transmittance: objective.mean_transmittance(&final_params.transmittance()),
        binarity_fraction: binarity_fraction(&final_params),
        final_loss,
        initial,
        final_params,
    })
}

/// Central finite-difference gradient of the loss, for verification.
pub fn finite_difference_gradient(objective: &MtfObjective, params: &RadialMaskParams, step: f64) -> Result<Vec<f64>> {
    let raw = params.raw_values();
    (0..raw.len())
        .map(|k| {
            let mut plus = raw.to_vec();
            let mut minus = raw.to_vec();
            plus[k] += step;
            minus[k] -= step;
            let lp = objective.loss(&RadialMaskParams::new(plus)?)?;
            let lm = objective.loss(&RadialMaskParams::new(minus)?)?;
            Ok((lp - lm) / (2.0 * step))
        })
        .collect()
}

/// Worst per-component disagreement between two gradients: relative error
/// where the reference is at least `abs_floor` in magnitude, absolute otherwise.
pub fn gradient_mismatch(analytic: &[f64], reference: &[f64], abs_floor: f64) -> (f64, f64) {
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for (a, r) in analytic.iter().zip(reference) {
        if r.abs() < abs_floor {
            worst_abs = worst_abs.max((a - r).abs());
        } else {
            worst_rel = worst_rel.max((a - r).abs() / r.abs());
        }
    }
    (worst_rel, worst_abs)
}
