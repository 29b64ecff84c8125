//! ADMM reconstruction with anisotropic total variation and nonnegativity.
//!
//! Solves `min_{v >= 0} 1/2 ||b - C H v||^2 + tau ||D v||_1` with the splitting
//! `u1 = H v`, `u2 = D v`, `w = v`. The unknown lives on the padded
//! convolution grid, where `H` (circular convolution) and `D` (periodic
//! forward differences) are both diagonal in the Fourier domain, so the
//! `v`-update is a pointwise division. The data block `u1` is solved
//! pixelwise because `C^T C` is a 0/1 mask. The scene occupies the center of
//! the padded grid and is cropped out at the end.

use ndarray::{s, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::fft::Fft2;
use crate::forward::{center_offset, embed, SensorMeasurement};
use crate::mask::MaskImage;
use crate::optics::{project_psf, Psf, SensorGeometry};

/// Relative tolerance for the operator adjoint checks run before a solve.
pub const ADJOINT_TOL: f64 = 1e-8;

/// Forward differences with replicate boundary: the last row of `dy` and the
/// last column of `dx` are zero.
pub fn tv_forward(image: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = image.dim();
    if h < 2 || w < 2 {
        return Err(Error::DegenerateGrid { ny: h, nx: w, min: 2 });
    }
    let mut dx = Array2::zeros((h, w));
    let mut dy = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                dx[[r, c]] = image[[r, c + 1]] - image[[r, c]];
            }
            if r + 1 < h {
                dy[[r, c]] = image[[r + 1, c]] - image[[r, c]];
            }
        }
    }
    Ok((dx, dy))
}

/// Adjoint of [`tv_forward`] (negative divergence).
pub fn tv_adjoint(dx: &Array2<f64>, dy: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = dx.dim();
    crate::error::ensure_same_dim((h, w), dy.dim())?;
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut v = 0.0;
            if c + 1 < w {
                v -= dx[[r, c]];
            }
            if c > 0 {
                v += dx[[r, c - 1]];
            }
            if r + 1 < h {
                v -= dy[[r, c]];
            }
            if r > 0 {
                v += dy[[r - 1, c]];
            }
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

/// Anisotropic TV norm with the replicate-boundary differences.
pub fn tv_norm(image: &Array2<f64>) -> Result<f64> {
    let (dx, dy) = tv_forward(image)?;
    Ok(dx.iter().chain(dy.iter()).map(|v| v.abs()).sum())
}

/// Forward differences that wrap around the grid edges.
pub fn tv_forward_periodic(image: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = image.dim();
    let dx = Array2::from_shape_fn((h, w), |(r, c)| image[[r, (c + 1) % w]] - image[[r, c]]);
    let dy = Array2::from_shape_fn((h, w), |(r, c)| image[[(r + 1) % h, c]] - image[[r, c]]);
    (dx, dy)
}

pub fn tv_adjoint_periodic(dx: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let (h, w) = dx.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        dx[[r, (c + w - 1) % w]] - dx[[r, c]] + dy[[(r + h - 1) % h, c]] - dy[[r, c]]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// TV weight in units of the unit-max measurement; `None` selects
    /// `1e-4 * max(A^T b)`.
    pub tau: Option<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Depth the reconstruction PSF was simulated or calibrated for.
    pub psf_depth_cm: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            tau: None,
            rho: 1.0,
            iterations: 100,
            psf_depth_cm: 30.0,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(invalid("tau", format!("{tau} must be nonnegative")));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(invalid("rho", format!("{} must be positive", self.rho)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub primal: f64,
    pub dual: f64,
    /// Data fidelity plus TV at the nonnegative iterate, in measurement units.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub channels: Vec<Array2<f64>>,
    /// Per channel, one record per iteration.
    pub residual_trace: Vec<Vec<ResidualRecord>>,
    pub depth_cm: f64,
}

impl Reconstruction {
    /// Residual trace with channels combined: residuals in quadrature,
    /// objectives summed.
    pub fn combined_trace(&self) -> Vec<ResidualRecord> {
        let n = self.residual_trace.iter().map(Vec::len).min().unwrap_or(0);
        (0..n)
            .map(|i| {
                let recs = self.residual_trace.iter().map(|t| t[i]);
                let (mut p, mut d, mut o) = (0.0, 0.0, 0.0);
                for r in recs {
                    p += r.primal * r.primal;
                    d += r.dual * r.dual;
                    o += r.objective;
                }
                ResidualRecord {
                    primal: p.sqrt(),
                    dual: d.sqrt(),
                    objective: o,
                }
            })
            .collect()
    }

    /// Write `iter,primal_residual,dual_residual,objective`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "primal_residual", "dual_residual", "objective"])?;
        for (i, r) in self.combined_trace().iter().enumerate() {
            w.write_record([(i + 1).to_string(), r.primal.to_string(), r.dual.to_string(), r.objective.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Operators of one reconstruction problem on the padded grid.
struct Problem {
    plan: Fft2,
    grid: (usize, usize),
    scene: (usize, usize),
    scene_offset: (usize, usize),
    sensor: (usize, usize),
    sensor_offset: (usize, usize),
    kernel: Array2<Complex64>,
    /// Eigenvalues of `D^T D` for periodic differences.
    laplacian: Array2<f64>,
}

impl Problem {
    fn new(psf: &Psf, sensor: (usize, usize), scene: (usize, usize)) -> Result<Self> {
        let (hk, wk) = psf.dim();
        let grid = (scene.0 + hk - 1, scene.1 + wk - 1);
        if sensor.0 > grid.0 || sensor.1 > grid.1 {
            return Err(invalid("measurement", format!("{sensor:?} larger than convolution grid {grid:?}")));
        }
        if grid.0 < 2 || grid.1 < 2 {
            return Err(Error::DegenerateGrid { ny: grid.0, nx: grid.1, min: 2 });
        }
        let scene_offset = center_offset(grid, scene);
        let sensor_offset = center_offset(grid, sensor);
        // Kernel tap t lands at t - scene_offset so that a scene pixel at
        // scene_offset + i reaches sensor_offset + r exactly where the linear
        // model crop_center(conv_full(v, h)) puts it.
        let mut shifted = Array2::zeros(grid);
        for ((r, c), v) in psf.kernel().indexed_iter() {
            let rr = (r + grid.0 - scene_offset.0) % grid.0;
            let cc = (c + grid.1 - scene_offset.1) % grid.1;
            shifted[[rr, cc]] = *v;
        }
        let plan = Fft2::new(grid.0, grid.1);
        let kernel = plan.forward_real(&shifted);
        if kernel[[0, 0]].norm() == 0.0 {
            return Err(Error::ZeroKernel);
        }
        let laplacian = Array2::from_shape_fn(grid, |(r, c)| {
            let sy = (PI * r as f64 / grid.0 as f64).sin();
            let sx = (PI * c as f64 / grid.1 as f64).sin();
            4.0 * (sy * sy + sx * sx)
        });
        Ok(Self {
            plan,
            grid,
            scene,
            scene_offset,
            sensor,
            sensor_offset,
            kernel,
            laplacian,
        })
    }

    fn convolve(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut spec = self.plan.forward_real(x);
        spec *= &self.kernel;
        self.plan.inverse_real(&spec)
    }

    fn correlate(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut spec = self.plan.forward_real(x);
        spec.zip_mut_with(&self.kernel, |a, k| *a *= k.conj());
        self.plan.inverse_real(&spec)
    }

    fn crop(&self, x: &Array2<f64>) -> Array2<f64> {
        let (oy, ox) = self.sensor_offset;
        x.slice(s![oy..oy + self.sensor.0, ox..ox + self.sensor.1]).to_owned()
    }

    fn uncrop(&self, b: &Array2<f64>) -> Array2<f64> {
        embed(b, self.grid, self.sensor_offset)
    }

    fn scene_window(&self, x: &Array2<f64>) -> Array2<f64> {
        let (oy, ox) = self.scene_offset;
        x.slice(s![oy..oy + self.scene.0, ox..ox + self.scene.1]).to_owned()
    }

    /// Inner-product checks for `C`, `H` and `D` on seeded random vectors.
    fn check_adjoints(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut rand = |dim: (usize, usize)| Array2::from_shape_fn(dim, |_| rng.gen::<f64>() - 0.5);
        let dot = |a: &Array2<f64>, b: &Array2<f64>| -> f64 { a.iter().zip(b.iter()).map(|(x, y)| x * y).sum() };
        let close = |l: f64, r: f64| (l - r).abs() <= ADJOINT_TOL * l.abs().max(r.abs()).max(f64::MIN_POSITIVE);

        let (x, y, b) = (rand(self.grid), rand(self.grid), rand(self.sensor));
        let (y2, y3) = (rand(self.grid), rand(self.grid));
        let checks = [
            ("crop", dot(&self.crop(&x), &b), dot(&x, &self.uncrop(&b))),
            ("convolution", dot(&self.convolve(&x), &y), dot(&x, &self.correlate(&y))),
            ("differences", {
                let (dx, dy) = tv_forward_periodic(&x);
                dot(&dx, &y2) + dot(&dy, &y3)
            }, dot(&x, &tv_adjoint_periodic(&y2, &y3))),
        ];
        for (name, l, r) in checks {
            if !close(l, r) {
                return Err(invalid("operator", format!("{name} adjoint check failed: {l} vs {r}")));
            }
        }
        Ok(())
    }

    fn objective(&self, b: &Array2<f64>, x: &Array2<f64>, tau: f64) -> f64 {
        let resid = &self.crop(&self.convolve(x)) - b;
        let (dx, dy) = tv_forward_periodic(x);
        let tv: f64 = dx.iter().chain(dy.iter()).map(|v| v.abs()).sum();
        0.5 * resid.iter().map(|v| v * v).sum::<f64>() + tau * tv
    }

    /// ADMM on one channel of a unit-max measurement.
    fn solve(&self, b: &Array2<f64>, tau: f64, rho: f64, iterations: usize) -> Result<(Array2<f64>, Vec<ResidualRecord>)> {
        let grid = self.grid;
        let ctb = self.uncrop(b);
        let ctc = self.uncrop(&Array2::ones(self.sensor));
        // with tau = 0 the TV split only slows convergence
        let use_tv = tau > 0.0;
        let denom = Zip::from(&self.kernel)
            .and(&self.laplacian)
            .map_collect(|k, l| rho * (k.norm_sqr() + if use_tv { *l } else { 0.0 } + 1.0));
        let thresh = tau / rho;
        let soft = |x: f64| x.signum() * (x.abs() - thresh).max(0.0);

        let mut v: Array2<f64> = Array2::zeros(grid);
        let mut u1: Array2<f64> = Array2::zeros(grid);
        let mut u2x: Array2<f64> = Array2::zeros(grid);
        let mut u2y: Array2<f64> = Array2::zeros(grid);
        let mut w: Array2<f64> = Array2::zeros(grid);
        let mut a1: Array2<f64> = Array2::zeros(grid);
        let mut a2x: Array2<f64> = Array2::zeros(grid);
        let mut a2y: Array2<f64> = Array2::zeros(grid);
        let mut a3: Array2<f64> = Array2::zeros(grid);
        let mut hv = Array2::zeros(grid);
        let (mut dvx, mut dvy) = (Array2::zeros(grid), Array2::zeros(grid));
        let mut trace = Vec::with_capacity(iterations);

        for it in 0..iterations {
            let (u1_prev, u2x_prev, u2y_prev, w_prev) = (u1.clone(), u2x.clone(), u2y.clone(), w.clone());

            if use_tv {
                Zip::from(&mut u2x).and(&dvx).and(&a2x).for_each(|u, d, a| *u = soft(d + a / rho));
                Zip::from(&mut u2y).and(&dvy).and(&a2y).for_each(|u, d, a| *u = soft(d + a / rho));
            }
            Zip::from(&mut u1)
                .and(&ctb)
                .and(&hv)
                .and(&a1)
                .and(&ctc)
                .for_each(|u, cb, h, a, m| *u = (cb + rho * h + a) / (m + rho));
            Zip::from(&mut w).and(&v).and(&a3).for_each(|w, v, a| *w = (v + a / rho).max(0.0));

            // v-update: (rho H^T H + rho D^T D + rho I) v = rhs
            let data = self.plan.forward_real(&(&u1 * rho - &a1));
            let mut rhs_space = &w * rho - &a3;
            if use_tv {
                rhs_space += &tv_adjoint_periodic(&(&u2x * rho - &a2x), &(&u2y * rho - &a2y));
            }
            let mut rhs = self.plan.forward_real(&rhs_space);
            Zip::from(&mut rhs)
                .and(&data)
                .and(&self.kernel)
                .and(&denom)
                .for_each(|r, d, k, den| *r = (*r + d * k.conj()) / den);
            let mut spec = rhs.clone();
            spec *= &self.kernel;
            v = self.plan.inverse_real(&rhs);
            hv = self.plan.inverse_real(&spec);
            if use_tv {
                let (nx, ny) = tv_forward_periodic(&v);
                dvx = nx;
                dvy = ny;
            }

            Zip::from(&mut a1).and(&hv).and(&u1).for_each(|a, h, u| *a += rho * (h - u));
            if use_tv {
                Zip::from(&mut a2x).and(&dvx).and(&u2x).for_each(|a, d, u| *a += rho * (d - u));
                Zip::from(&mut a2y).and(&dvy).and(&u2y).for_each(|a, d, u| *a += rho * (d - u));
            }
            Zip::from(&mut a3).and(&v).and(&w).for_each(|a, v, w| *a += rho * (v - w));

            let sq = |a: &Array2<f64>, b: &Array2<f64>| -> f64 { a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum() };
            let primal = (sq(&hv, &u1) + sq(&dvx, &u2x) + sq(&dvy, &u2y) + sq(&v, &w)).sqrt();
            let dual = rho * (sq(&u1, &u1_prev) + sq(&u2x, &u2x_prev) + sq(&u2y, &u2y_prev) + sq(&w, &w_prev)).sqrt();
            let objective = self.objective(b, &v.mapv(|x| x.max(0.0)), tau);
            if !(primal.is_finite() && dual.is_finite() && objective.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "admm",
                    iteration: it + 1,
                });
            }
            trace.push(ResidualRecord { primal, dual, objective });
        }
        Ok((v.mapv(|x| x.max(0.0)), trace))
    }
}

/// Default TV weight: `1e-4 * max(A^T b)` for a unit-max measurement.
pub fn default_tau(b: &SensorMeasurement, psf: &Psf) -> Result<f64> {
    let problem = Problem::new(psf, b.dim(), b.dim())?;
    let peak = b.max();
    if peak <= 0.0 {
        return Ok(0.0);
    }
    let m = b
        .channels
        .iter()
        .map(|ch| problem.correlate(&problem.uncrop(&(ch / peak))).fold(f64::MIN, |m, v| m.max(*v)))
        .fold(f64::MIN, f64::max);
    Ok(1e-4 * m.max(0.0))
}

/// Reconstruct a scene of the measurement's size with one PSF.
pub fn admm_solve(b: &SensorMeasurement, psf: &Psf, cfg: &AdmmConfig) -> Result<Reconstruction> {
    admm_solve_scene(b, psf, cfg, b.dim())
}

/// Reconstruct a scene of explicit size `scene` (the crop of the padded grid
/// that is returned).
pub fn admm_solve_scene(b: &SensorMeasurement, psf: &Psf, cfg: &AdmmConfig, scene: (usize, usize)) -> Result<Reconstruction> {
    cfg.validate()?;
    let problem = Problem::new(psf, b.dim(), scene)?;
    problem.check_adjoints()?;
    let tau = match cfg.tau {
        Some(t) => t,
        None => default_tau(b, psf)?,
    };
    let peak = b.max();
    let scale = if peak > 0.0 { peak } else { 1.0 };

    let solved = b
        .channels
        .par_iter()
        .map(|ch| {
            let (x, mut trace) = problem.solve(&(ch / scale), tau, cfg.rho, cfg.iterations)?;
            // report objectives in measurement units
            for r in &mut trace {
                r.objective *= scale * scale;
            }
            Ok((problem.scene_window(&x) * scale, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let (channels, residual_trace) = solved.into_iter().unzip();
    Ok(Reconstruction {
        channels,
        residual_trace,
        depth_cm: psf.depth_cm,
    })
}

/// Reconstruct the same measurement with PSFs projected at each depth.
pub fn refocus_sweep(
    b: &SensorMeasurement,
    mask: &MaskImage,
    depths_cm: &[f64],
    mask_sensor_dist_mm: f64,
    sensor: SensorGeometry,
    cfg: &AdmmConfig,
) -> Result<Vec<(f64, Reconstruction)>> {
    if depths_cm.is_empty() {
        return Err(invalid("depths", "need at least one depth"));
    }
    depths_cm
        .iter()
        .map(|&z| {
            let psf = project_psf(mask, z, mask_sensor_dist_mm, sensor)?;
            let cfg = AdmmConfig {
                psf_depth_cm: z,
                ..cfg.clone()
            };
            Ok((z, admm_solve(b, &psf, &cfg)?))
        })
        .collect()
}
