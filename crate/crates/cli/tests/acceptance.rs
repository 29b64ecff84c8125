//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Exits nonzero when a criterion
//! outside `KNOWN_RED` fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radialens::experiment::{derive_seed, ExperimentConfig, ExperimentSummary};
use radialens::forward::{capture, convolve_fft, crop_center, pad_adjoint, ForwardOperator, Layer, Scene, SensorMeasurement};
use radialens::mask::{self, MaskGeometry};
use radialens::metrics::psnr;
use radialens::optics::{self, project_psf, Psf, SensorGeometry};
use radialens::optimizer::{self, MtfObjective, OptimConfig, OptimTrace};
use radialens::recon::{self, AdmmConfig};
use radialens::scenes;

/// Criteria reported red on purpose; see the README.
const KNOWN_RED: &[&str] = &["AC3"];

const BIN: &str = env!("CARGO_BIN_EXE_radialens");

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

type Check = Result<Outcome, String>;

fn outcome(id: &'static str, pass: bool, detail: String) -> Check {
    Ok(Outcome { id, pass, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_array(rng: &mut ChaCha8Rng, dim: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(dim, |_| rng.gen_range(lo..hi))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn rel_gap(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

// ---- independent oracles ----

/// Full linear convolution by nested loops.
fn direct_conv(image: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (hi, wi) = image.dim();
    let (hk, wk) = kernel.dim();
    let mut out = Array2::zeros((hi + hk - 1, wi + wk - 1));
    for ((r, c), v) in image.indexed_iter() {
        if *v == 0.0 {
            continue;
        }
        for ((kr, kc), k) in kernel.indexed_iter() {
            out[[r + kr, c + kc]] += v * k;
        }
    }
    out
}

/// DC-normalized DFT magnitude by the textbook double sum.
fn naive_mtf(kernel: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = kernel.dim();
    let mut mags = Array2::zeros((ny, nx));
    for u in 0..ny {
        for v in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            for ((r, c), h) in kernel.indexed_iter() {
                let phase = -std::f64::consts::TAU * ((u * r) as f64 / ny as f64 + (v * c) as f64 / nx as f64);
                acc += Complex64::from_polar(*h, phase);
            }
            mags[[u, v]] = acc.norm();
        }
    }
    let dc = mags[[0, 0]];
    mags / dc
}

// ---- criteria ----

fn ac1() -> Check {
    let start = Instant::now();
    let (mut components, mut failures, mut near_zero) = (0usize, 0usize, 0usize);
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for n in [32usize, 64] {
        for n_sections in [4usize, 16, 70] {
            for (seed, spread) in [(0u64, 0.5), (1, 0.5), (2, 2.0)] {
                let cfg = OptimConfig {
                    grid_ny: n,
                    grid_nx: n,
                    n_sections,
                    seed,
                    init_low: -spread,
                    init_high: spread,
                    ..OptimConfig::default()
                };
                let objective = MtfObjective::from_config(&cfg).map_err(err)?;
                let params = optimizer::initial_params(&cfg).map_err(err)?;
                let (_, analytic) = objective.loss_and_gradient(&params).map_err(err)?;
                let fd = optimizer::finite_difference_gradient(&objective, &params, 1e-4).map_err(err)?;
                for (a, r) in analytic.iter().zip(&fd) {
                    components += 1;
                    let abs = (a - r).abs();
                    // absolute tolerance only where the reference itself is below it
                    let ok = if r.abs() < 1e-8 {
                        near_zero += 1;
                        worst_abs = worst_abs.max(abs);
                        abs < 1e-8
                    } else {
                        let rel = abs / r.abs();
                        worst_rel = worst_rel.max(rel);
                        rel < 1e-4
                    };
                    if !ok {
                        failures += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "AC1",
        failures == 0 && secs < 30.0,
        format!(
            "gradient vs central FD: {failures}/{components} components out of tolerance, worst rel {worst_rel:.2e} (< 1e-4), \
             {near_zero} near-zero components (worst abs {worst_abs:.1e} < 1e-8), {secs:.1}s (limit 30s)"
        ),
    )
}

struct MtfComparison {
    mean_opt: f64,
    baselines: Vec<(usize, f64, f64)>,
}

fn compare_with_stars(trace: &OptimTrace, geometry: MaskGeometry) -> Result<MtfComparison, String> {
    let realized = mask::realize_radial(&trace.final_params, geometry).map_err(err)?;
    let spec = optics::mtf(&realized.grid).map_err(err)?;
    let bins = (geometry.ny.min(geometry.nx) / 4).max(2);
    let profile = optics::radial_mtf_profile(&spec, bins).map_err(err)?;
    let mut baselines = Vec::new();
    for sections in [20usize, 40, 60] {
        let star = mask::gen_star_chart(sections, geometry).map_err(err)?;
        let s = optics::mtf(&star.grid).map_err(err)?;
        let p = optics::radial_mtf_profile(&s, bins).map_err(err)?;
        let wins = profile.iter().zip(&p).filter(|(a, b)| a.1 >= b.1).count();
        baselines.push((sections, s.mean(), wins as f64 / bins as f64));
    }
    Ok(MtfComparison {
        mean_opt: spec.mean(),
        baselines,
    })
}

fn ac2(full: &OptimTrace, full_cfg: &OptimConfig, full_secs: f64) -> Check {
    let cmp = compare_with_stars(full, full_cfg.geometry())?;
    let full_ok = cmp.baselines.iter().all(|(_, m, f)| cmp.mean_opt > *m && *f >= 0.7);

    let smoke_cfg = OptimConfig {
        grid_ny: 64,
        grid_nx: 64,
        n_sections: 32,
        epochs: 500,
        ..OptimConfig::default()
    };
    let start = Instant::now();
    let smoke = optimizer::optimize(&smoke_cfg).map_err(err)?;
    let smoke_cmp = compare_with_stars(&smoke, smoke_cfg.geometry())?;
    let smoke_secs = start.elapsed().as_secs_f64();
    let smoke_ok = smoke_cmp.baselines.iter().all(|(_, m, _)| smoke_cmp.mean_opt > *m) && smoke_secs < 60.0;

    let fmt = |c: &MtfComparison, bins: bool| {
        c.baselines
            .iter()
            .map(|(s, m, f)| if bins { format!("star{s} {m:.5} ({:.0}% bins)", f * 100.0) } else { format!("star{s} {m:.5}") })
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        "AC2",
        full_ok && smoke_ok,
        format!(
            "140x140/70 sections mean MTF {:.5} vs {} [{full_secs:.1}s]; smoke 64x64/32 mean {:.5} vs {} [{smoke_secs:.1}s, limit 60s]",
            cmp.mean_opt,
            fmt(&cmp, true),
            smoke_cmp.mean_opt,
            fmt(&smoke_cmp, false)
        ),
    )
}

fn ac3(full: &OptimTrace, full_cfg: &OptimConfig) -> Check {
    let realized = mask::realize_radial(&full.final_params, full_cfg.geometry()).map_err(err)?;
    let binarity = optimizer::binarity_fraction(&full.final_params);
    let mean_t = realized.mean_in_aperture();
    outcome(
        "AC3",
        binarity >= 0.8 && (0.35..=0.55).contains(&mean_t),
        format!("binarity {binarity:.3} (>= 0.8), mean in-aperture transmittance {mean_t:.4} (in [0.35, 0.55])"),
    )
}

fn ac4(full: &OptimTrace, table1: &ExperimentConfig) -> Check {
    let start = Instant::now();
    let g = &table1.geometry;
    let geometry = g.mask_geometry().map_err(err)?;
    let sensor = g.sensor().map_err(err)?;
    let masks = [
        ("radial", mask::realize_radial(&full.final_params, geometry).map_err(err)?),
        ("fza", mask::gen_fza(mask::fza_beta_for_zones(&geometry, 8.0), geometry).map_err(err)?),
        ("random", mask::gen_random(0.5, derive_seed(table1.seed, 5), geometry).map_err(err)?),
    ];
    let mut maes = Vec::new();
    for (label, m) in &masks {
        let far = project_psf(m, 30.0, g.mask_sensor_dist_mm, sensor).map_err(err)?;
        let near = project_psf(m, 5.0, g.mask_sensor_dist_mm, sensor).map_err(err)?;
        maes.push((*label, optics::psf_scale_mae(&far, &near).map_err(err)?));
    }
    let secs = start.elapsed().as_secs_f64();
    let (r, f, x) = (maes[0].1, maes[1].1, maes[2].1);
    outcome(
        "AC4",
        r <= 0.5 * f && r <= 0.5 * x && secs < 10.0,
        format!(
            "psf_scale_mae 30 vs 5 cm at d = {} mm: radial {r:.3e}, fza {f:.3e}, random {x:.3e}; ratios {:.3} / {:.3} (<= 0.5), {secs:.2}s (limit 10s)",
            g.mask_sensor_dist_mm,
            r / f,
            r / x
        ),
    )
}

fn near_row(summary: &ExperimentSummary, label: &str) -> Result<(f64, f64), String> {
    let row = summary.table.iter().find(|r| r.mask == label).ok_or(format!("no table row for {label}"))?;
    Ok((row.near_psnr_db.as_f64(), row.near_ssim))
}

fn ac5(summary: &ExperimentSummary, secs: f64) -> Check {
    let (rp, rs) = near_row(summary, "radial")?;
    let (fp, fs) = near_row(summary, "fza")?;
    let (xp, xs) = near_row(summary, "random")?;
    let pass = rp - fp >= 3.0 && rp - xp >= 3.0 && rs > fs && rs > xs && secs < 300.0;
    outcome(
        "AC5",
        pass,
        format!(
            "near-region PSNR radial {rp:.2} / fza {fp:.2} / random {xp:.2} dB (margins {:.2}, {:.2} >= 3); \
             SSIM {rs:.3} / {fs:.3} / {xs:.3}; experiment run {secs:.1}s (limit 300s)",
            rp - fp,
            rp - xp
        ),
    )
}

/// PSNR of the layer at `layer_cm` when reconstructed with the PSF at `focus_cm`.
fn layer_psnr(summary: &ExperimentSummary, label: &str, focus_cm: f64, layer_cm: f64) -> Result<f64, String> {
    let m = summary.mask(label).ok_or(format!("no mask {label}"))?;
    let f = m.at_focus(focus_cm).ok_or(format!("{label}: no focus {focus_cm}"))?;
    let l = f
        .layers
        .iter()
        .find(|l| (l.depth_cm - layer_cm).abs() < 1e-9)
        .ok_or(format!("{label}: no layer {layer_cm}"))?;
    Ok(l.metrics.psnr_db.as_f64())
}

fn ac6(summary: &ExperimentSummary) -> Check {
    let (near, far) = (summary.near_depth_cm, summary.far_depth_cm);
    let p = |label, focus, layer| layer_psnr(summary, label, focus, layer);
    let fza_far = (p("fza", far, far)?, p("fza", near, far)?);
    let fza_near = (p("fza", far, near)?, p("fza", near, near)?);
    let crossover = fza_far.0 > fza_far.1 && fza_near.1 > fza_near.0;
    let rad_far = (p("radial", far, far)?, p("radial", near, far)?);
    let rad_near = (p("radial", far, near)?, p("radial", near, near)?);
    let d_far = (rad_far.0 - rad_far.1).abs();
    let d_near = (rad_near.0 - rad_near.1).abs();
    outcome(
        "AC6",
        crossover && d_far < 1.0 && d_near < 1.0,
        format!(
            "fza far layer {:.2} (far PSF) vs {:.2} (near PSF), near layer {:.2} vs {:.2} (crossover {}); \
             radial variation far {d_far:.2} dB, near {d_near:.2} dB (< 1)",
            fza_far.0,
            fza_far.1,
            fza_near.1,
            fza_near.0,
            if crossover { "yes" } else { "no" }
        ),
    )
}

fn ac7() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut conv_err: f64 = 0.0;
    let mut mtf_err: f64 = 0.0;
    let mut adj_err: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    for _ in 0..40 {
        let di = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let dk = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let image = random_array(&mut rng, di, -1.0, 1.0);
        let kernel = random_array(&mut rng, dk, 0.0, 1.0);
        let fast = convolve_fft(&image, &kernel).map_err(err)?;
        let slow = direct_conv(&image, &kernel);
        conv_err = conv_err.max((&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs())));

        let spec = optics::mtf(&kernel).map_err(err)?;
        mtf_err = mtf_err.max((&spec.values - &naive_mtf(&kernel)).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    for _ in 0..20 {
        let scene = (rng.gen_range(2..=24), rng.gen_range(2..=24));
        let kdim = (rng.gen_range(1..=24), rng.gen_range(1..=24));
        let full = (scene.0 + kdim.0 - 1, scene.1 + kdim.1 - 1);
        let sensor = (rng.gen_range(1..=full.0), rng.gen_range(1..=full.1));
        let psf = Psf::new(random_array(&mut rng, kdim, 0.0, 1.0), 30.0, 1.0).map_err(err)?;
        let op = ForwardOperator::new(&psf, scene, sensor).map_err(err)?;
        let x = random_array(&mut rng, scene, -1.0, 1.0);
        let y = random_array(&mut rng, sensor, -1.0, 1.0);
        adj_err = adj_err.max(rel_gap(dot(&op.apply(&x).map_err(err)?, &y), dot(&x, &op.adjoint(&y).map_err(err)?)));

        // crop alone
        let big = random_array(&mut rng, full, -1.0, 1.0);
        let cropped = crop_center(&big, sensor.0, sensor.1).map_err(err)?;
        let padded = pad_adjoint(&y, full.0, full.1).map_err(err)?;
        adj_err = adj_err.max(rel_gap(dot(&cropped, &y), dot(&big, &padded)));

        // TV, replicate and periodic boundaries
        let (px, py) = (random_array(&mut rng, scene, -1.0, 1.0), random_array(&mut rng, scene, -1.0, 1.0));
        let (dx, dy) = recon::tv_forward(&x).map_err(err)?;
        let back = recon::tv_adjoint(&px, &py).map_err(err)?;
        adj_err = adj_err.max(rel_gap(dot(&dx, &px) + dot(&dy, &py), dot(&x, &back)));
        let (dx, dy) = recon::tv_forward_periodic(&x);
        let back = recon::tv_adjoint_periodic(&px, &py);
        adj_err = adj_err.max(rel_gap(dot(&dx, &px) + dot(&dy, &py), dot(&x, &back)));

        let pos = random_array(&mut rng, scene, 0.0, 1.0);
        let out = convolve_fft(&pos, psf.kernel()).map_err(err)?;
        mass_err = mass_err.max(rel_gap(out.sum(), pos.sum() * psf.kernel().sum()));
    }

    // a projected desk-scale PSF on a desk-scale chart
    let g = MaskGeometry::new(128, 156, 55.2, mask::DEFAULT_APERTURE_FRACTION).map_err(err)?;
    let fza = mask::gen_fza(mask::fza_beta_for_zones(&g, 8.0), g).map_err(err)?;
    let psf = project_psf(&fza, 5.0, 4.0, SensorGeometry::new(128, 156, 55.2).map_err(err)?).map_err(err)?;
    let chart = scenes::ou_glyphs(128, 156).map_err(err)?;
    let out = convolve_fft(&chart, psf.kernel()).map_err(err)?;
    mass_err = mass_err.max(rel_gap(out.sum(), chart.sum()));

    let secs = start.elapsed().as_secs_f64();
    outcome(
        "AC7",
        conv_err <= 1e-10 && adj_err <= 1e-8 && mtf_err <= 1e-10 && mass_err <= 1e-8 && secs < 30.0,
        format!(
            "fft vs direct conv {conv_err:.1e} (<= 1e-10), adjoints {adj_err:.1e} rel (<= 1e-8), \
             mtf vs naive DFT {mtf_err:.1e} (<= 1e-10), mass {mass_err:.1e} rel (<= 1e-8), {secs:.1}s (limit 30s)"
        ),
    )
}

fn ac8(full: &OptimTrace, table1: &ExperimentConfig, summary: &ExperimentSummary) -> Check {
    // impulse PSF, identity crop, no TV
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let chans: Vec<Array2<f64>> = (0..3).map(|_| random_array(&mut rng, (32, 40), 0.0, 1.0)).collect();
    let b = SensorMeasurement::new(chans.clone()).map_err(err)?;
    let cfg = AdmmConfig {
        tau: Some(0.0),
        rho: 1.0,
        iterations: 100,
        psf_depth_cm: 30.0,
    };
    let rec = recon::admm_solve(&b, &Psf::impulse(1, 1), &cfg).map_err(err)?;
    let impulse_err = rec
        .channels
        .iter()
        .zip(&chans)
        .flat_map(|(r, c)| r.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    let mut objective_ok = objective_decreased(&rec);

    // matched single-depth round trip; the measurement comes from the direct oracle
    let g = &table1.geometry;
    let dim = (128, 128);
    let geometry = MaskGeometry::new(dim.0, dim.1, g.sensor_pitch_um, g.aperture_fraction).map_err(err)?;
    let sensor = SensorGeometry::new(dim.0, dim.1, g.sensor_pitch_um).map_err(err)?;
    let radial = mask::realize_radial(&full.final_params, geometry).map_err(err)?;
    let psf = project_psf(&radial, 30.0, g.mask_sensor_dist_mm, sensor).map_err(err)?;
    let truth = scenes::plush_toy(dim.0, dim.1, 1, 7).map_err(err)?.remove(0);
    let oracle = crop_center(&direct_conv(&truth, psf.kernel()), dim.0, dim.1).map_err(err)?;
    let scene = Scene::new(vec![Layer {
        depth_cm: 30.0,
        channels: vec![truth.clone()],
    }])
    .map_err(err)?;
    let captured = capture(&scene, std::slice::from_ref(&psf), dim, None, 0).map_err(err)?;
    let capture_gap = (&captured.channels[0] - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let b = SensorMeasurement::new(vec![oracle.mapv(|v| v.max(0.0))]).map_err(err)?;
    let cfg = AdmmConfig {
        psf_depth_cm: 30.0,
        ..table1.recon.clone()
    };
    let rec = recon::admm_solve(&b, &psf, &cfg).map_err(err)?;
    let round_trip = psnr(&truth, &rec.channels[0], 1.0).map_err(err)?.as_f64();
    objective_ok &= objective_decreased(&rec);

    let bundled_ok = summary.masks.iter().flat_map(|m| &m.focus).all(|f| f.objective_last <= f.objective_first);
    outcome(
        "AC8",
        impulse_err <= 1e-6 && round_trip >= 25.0 && capture_gap <= 1e-10 && objective_ok && bundled_ok,
        format!(
            "impulse/tau=0 max err {impulse_err:.1e} (<= 1e-6); round trip {round_trip:.2} dB (>= 25, rho {}, {} iters), \
             capture vs direct oracle {capture_gap:.1e}; objective last <= first: {}",
            cfg.rho,
            cfg.iterations,
            if objective_ok && bundled_ok { "all runs" } else { "VIOLATED" }
        ),
    )
}

fn objective_decreased(rec: &recon::Reconstruction) -> bool {
    rec.residual_trace
        .iter()
        .all(|t| matches!((t.first(), t.last()), (Some(a), Some(b)) if b.objective <= a.objective))
}

// ---- CLI runs ----

fn run_cli(cwd: &Path, args: &[&str], envs: &[(&str, &str)]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .envs(envs.iter().copied())
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("`radialens {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).map_err(err)?.to_path_buf();
                files.insert(rel, fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(files)
}

fn command_pipeline(cwd: &Path, stub_config: &str) -> Result<(), String> {
    fs::write(
        cwd.join("scene.json"),
        r#"{"layers": [{"depth_cm": 30, "image": "builtin:toy"}, {"depth_cm": 5, "image": "builtin:ou"}]}"#,
    )
    .map_err(err)?;
    let steps: &[&[&str]] = &[
        &["mask", "optimize", "--sections", "16", "--size", "48x48", "--epochs", "200", "--seed", "3", "--out", "params.json", "--trace", "optim.csv"],
        &["mask", "gen", "--kind", "radial", "--params", "params.json", "--size", "64x64", "--out", "radial.pfm", "--png", "radial.png"],
        &["mask", "gen", "--kind", "star", "--sections", "20", "--size", "64x64", "--out", "star.pfm"],
        &["mask", "gen", "--kind", "fza", "--size", "64x64", "--out", "fza.pfm"],
        &["mask", "gen", "--kind", "random", "--seed", "5", "--size", "64x64", "--out", "random.pfm"],
        &["psf", "--mask", "radial.pfm", "--depth-cm", "30", "--sensor", "64x78", "--out", "psf30.pfm"],
        &["mtf", "--input", "psf30.pfm", "--out", "mtf.csv"],
        &[
            "capture", "--scene", "scene.json", "--mask", "radial.pfm", "--sensor", "64x78", "--channels", "3", "--gaussian-sigma", "0.001",
            "--seed", "9", "--out", "meas.pfm", "--png", "meas.png",
        ],
        &[
            "recon", "admm", "--measurement", "meas.pfm", "--psf", "psf30.pfm", "--rho", "0.001", "--iters", "30", "--out", "recon.png", "--pfm",
            "recon.pfm", "--trace", "residuals.csv",
        ],
        &[
            "refocus", "--measurement", "meas.pfm", "--mask", "radial.pfm", "--depths", "30,5", "--sensor", "64x78", "--rho", "0.001", "--iters",
            "20", "--out-dir", "refocus",
        ],
        &["metrics", "--ref", "recon.pfm", "--test", "refocus/recon_30cm.pfm", "--fit-gain", "--out", "metrics.json"],
        &["experiment", "run", "--config", stub_config, "--out", "stub"],
    ];
    for args in steps {
        run_cli(cwd, args, &[])?;
    }
    Ok(())
}

fn compare_runs(a: &Path, b: &Path) -> Result<(usize, Vec<String>), String> {
    let (sa, sb) = (snapshot(a)?, snapshot(b)?);
    let mut diffs = Vec::new();
    for (path, bytes) in &sa {
        match sb.get(path) {
            Some(other) if other == bytes => {}
            Some(_) => diffs.push(format!("{} differs", path.display())),
            None => diffs.push(format!("{} missing in rerun", path.display())),
        }
    }
    diffs.extend(sb.keys().filter(|p| !sa.contains_key(*p)).map(|p| format!("{} only in rerun", p.display())));
    Ok((sa.len(), diffs))
}

fn ac9(table1_path: &Path, first_run: &Path) -> Check {
    let root = workspace_root();
    let stub = root.join("configs/impulse_stub.json");
    let stub = stub.to_str().ok_or("non-UTF-8 path")?;
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        command_pipeline(d.path(), stub)?;
    }
    let (n_cmd, mut diffs) = compare_runs(dirs[0].path(), dirs[1].path())?;

    // the bundled experiment again, single-threaded
    let rerun = tempfile::tempdir().map_err(err)?;
    let cfg = table1_path.to_str().ok_or("non-UTF-8 path")?;
    run_cli(rerun.path(), &["experiment", "run", "--config", cfg, "--out", "table1"], &[("RADIALENS_THREADS", "1")])?;
    let (n_exp, exp_diffs) = compare_runs(first_run, &rerun.path().join("table1"))?;
    diffs.extend(exp_diffs);

    outcome(
        "AC9",
        diffs.is_empty(),
        if diffs.is_empty() {
            format!(
                "byte-identical reruns: {} files from every subcommand, {} files from the bundled experiment (second run single-threaded)",
                n_cmd, n_exp
            )
        } else {
            format!("{} mismatches: {}", diffs.len(), diffs.iter().take(5).cloned().collect::<Vec<_>>().join("; "))
        },
    )
}

fn report(results: Vec<(&'static str, Check)>) -> bool {
    let mut ok = true;
    for (id, r) in results {
        let o = r.unwrap_or_else(|e| Outcome {
            id,
            pass: false,
            detail: format!("error: {e}"),
        });
        let red = KNOWN_RED.contains(&o.id);
        let tag = match (o.pass, red) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{} {tag}: {}", o.id, o.detail);
        if !o.pass && !red {
            ok = false;
        }
    }
    ok
}

fn main() {
    // libtest-style flags (--nocapture, filters) are accepted and ignored
    let root = workspace_root();
    let table1_path = root.join("configs/table1.json");
    let mut results: Vec<(&'static str, Check)> = Vec::new();

    results.push(("AC1", ac1()));

    let full_cfg = OptimConfig::default();
    let start = Instant::now();
    let full = optimizer::optimize(&full_cfg);
    let full_secs = start.elapsed().as_secs_f64();

    let table1 = ExperimentConfig::load(&table1_path);
    let run_dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let experiment = table1_path
        .to_str()
        .ok_or_else(|| "non-UTF-8 path".to_string())
        .and_then(|cfg| run_cli(run_dir.path(), &["experiment", "run", "--config", cfg, "--out", "table1"], &[]))
        .and_then(|_| radialens::io::read_json::<ExperimentSummary>(&run_dir.path().join("table1/summary.json")).map_err(err));
    let experiment_secs = start.elapsed().as_secs_f64();

    match (&full, &table1) {
        (Ok(full), Ok(table1)) => {
            results.push(("AC2", ac2(full, &full_cfg, full_secs)));
            results.push(("AC3", ac3(full, &full_cfg)));
            results.push(("AC4", ac4(full, table1)));
        }
        _ => {
            let e = format!("optimization or config failed: {:?} / {:?}", full.as_ref().err(), table1.as_ref().err());
            for id in ["AC2", "AC3", "AC4"] {
                results.push((id, Err(e.clone())));
            }
        }
    }
    match &experiment {
        Ok(summary) => {
            results.push(("AC5", ac5(summary, experiment_secs)));
            results.push(("AC6", ac6(summary)));
        }
        Err(e) => {
            results.push(("AC5", Err(e.clone())));
            results.push(("AC6", Err(e.clone())));
        }
    }
    results.push(("AC7", ac7()));
    results.push((
        "AC8",
        match (&full, &table1, &experiment) {
            (Ok(f), Ok(t), Ok(s)) => ac8(f, t, s),
            _ => Err("prerequisite run failed".into()),
        },
    ));
    results.push((
        "AC9",
        match &experiment {
            Ok(_) => ac9(&table1_path, &run_dir.path().join("table1")),
            Err(e) => Err(e.clone()),
        },
    ));

    let ok = report(results);
    println!("known red: {}", KNOWN_RED.join(", "));
    if !ok {
        std::process::exit(1);
    }
}
