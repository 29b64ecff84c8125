use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

use radialens::experiment::{run_experiment, ExperimentConfig, SceneManifest};
use radialens::forward::{capture, NoiseModel, SensorMeasurement};
use radialens::io::{self, Provenance};
use radialens::mask::{self, MaskGeometry, MaskImage, RadialMaskParams, DEFAULT_APERTURE_FRACTION};
use radialens::metrics;
use radialens::optics::{self, Psf, SensorGeometry};
use radialens::optimizer::{self, OptimConfig};
use radialens::recon::{admm_solve_scene, refocus_sweep, AdmmConfig, Reconstruction};

const THREADS_ENV: &str = "RADIALENS_THREADS";

#[derive(Parser)]
#[command(name = "radialens", version, about = "Radial coded-mask lensless imaging toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or optimize coded masks.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Project a mask into the PSF for one source depth.
    Psf(PsfArgs),
    /// Radial MTF profile of a PSF or mask.
    Mtf(MtfArgs),
    /// Simulate a sensor measurement of a layered scene.
    Capture(CaptureArgs),
    /// Reconstruct a scene from a measurement.
    #[command(subcommand)]
    Recon(ReconCommand),
    /// Reconstruct one measurement at several PSF depths.
    Refocus(RefocusArgs),
    /// PSNR / SSIM / MAE between two images.
    Metrics(MetricsArgs),
    /// Config-driven end-to-end experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Subcommand)]
enum MaskCommand {
    Gen(MaskGenArgs),
    Optimize(MaskOptimizeArgs),
}

#[derive(Subcommand)]
enum ReconCommand {
    Admm(ReconAdmmArgs),
}

#[derive(Subcommand)]
enum ExperimentCommand {
    Run(ExperimentRunArgs),
}

fn parse_dim(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MaskKind {
    Radial,
    Star,
    Fza,
    Random,
}

#[derive(Args)]
struct MaskGenArgs {
    #[arg(long, value_enum)]
    kind: MaskKind,
    /// Grid size HxW.
    #[arg(long, value_parser = parse_dim, default_value = "128x156")]
    size: (usize, usize),
    #[arg(long, default_value_t = 55.2)]
    pitch_um: f64,
    #[arg(long, default_value_t = DEFAULT_APERTURE_FRACTION)]
    aperture: f64,
    /// Radial parameter JSON (kind radial).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Wedge count (kind star).
    #[arg(long, default_value_t = 40)]
    sections: usize,
    /// Full zones inside the aperture radius (kind fza).
    #[arg(long, default_value_t = 8.0)]
    zones: f64,
    /// Open-pixel probability (kind random).
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask transmittance as PFM.
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit PNG preview.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct MaskOptimizeArgs {
    #[arg(long, default_value_t = 70)]
    sections: usize,
    #[arg(long, value_parser = parse_dim, default_value = "140x140")]
    size: (usize, usize),
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_APERTURE_FRACTION)]
    aperture: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SensorArgs {
    #[arg(long, value_parser = parse_dim, default_value = "128x156")]
    sensor: (usize, usize),
    #[arg(long, default_value_t = 55.2)]
    pitch_um: f64,
    #[arg(long, default_value_t = 4.0)]
    dist_mm: f64,
}

#[derive(Args)]
struct PsfArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    depth_cm: f64,
    #[command(flatten)]
    sensor: SensorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MtfArgs {
    /// Single-channel PFM (PSF or mask).
    #[arg(long)]
    input: PathBuf,
    /// Number of radial bins; defaults to min(H, W) / 4.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptureArgs {
    /// Scene manifest {"layers": [{"depth_cm", "image"}]}.
    #[arg(long)]
    scene: PathBuf,
    /// Mask PFM; PSFs are projected for every layer depth.
    #[arg(long, conflicts_with = "psf")]
    mask: Option<PathBuf>,
    /// Precomputed PSF PFMs with sidecars, one per layer depth.
    #[arg(long)]
    psf: Vec<PathBuf>,
    #[command(flatten)]
    sensor: SensorArgs,
    /// Channels of built-in charts.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, conflicts_with = "poisson_scale")]
    gaussian_sigma: Option<f64>,
    #[arg(long)]
    poisson_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measurement PFM.
    #[arg(long)]
    out: PathBuf,
    /// Optional normalized 16-bit PNG.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    /// TV weight for the unit-max measurement; default 1e-4 max(A^T b).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
}

#[derive(Args)]
struct ReconAdmmArgs {
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    psf: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Scene size HxW; defaults to the measurement size.
    #[arg(long, value_parser = parse_dim)]
    scene_size: Option<(usize, usize)>,
    /// 16-bit PNG, normalized to the reconstruction max.
    #[arg(long)]
    out: PathBuf,
    /// Optional lossless PFM copy.
    #[arg(long)]
    pfm: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct RefocusArgs {
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    depths: Vec<f64>,
    #[command(flatten)]
    sensor: SensorArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Fit a least-squares gain to the test image first.
    #[arg(long)]
    fit_gain: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentRunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run at 4x the configured grid (512x624 for the bundled table1 config).
    #[arg(long)]
    full_scale: bool,
}

fn provenance(params: &Value, seed: u64) -> Result<Provenance> {
    Ok(Provenance::new(params, seed)?)
}

fn single_channel(mut chans: Vec<Array2<f64>>, what: &Path) -> Result<Array2<f64>> {
    if chans.len() != 1 {
        bail!("{} must be single-channel, found {} channels", what.display(), chans.len());
    }
    Ok(chans.remove(0))
}

/// Load a mask PFM; pitch and aperture come from its sidecar when present.
fn load_mask(path: &Path, default_pitch: f64) -> Result<MaskImage> {
    let grid = single_channel(io::load_pfm(path).with_context(|| format!("reading mask {}", path.display()))?, path)?;
    let side: Option<Value> = io::read_json(&io::sidecar_path(path)).ok();
    let field = |k: &str| side.as_ref().and_then(|s| s.get(k)).and_then(Value::as_f64);
    let pitch = field("pitch_um").unwrap_or(default_pitch);
    let aperture = field("aperture_fraction").unwrap_or(DEFAULT_APERTURE_FRACTION);
    Ok(MaskImage::from_grid(grid, pitch, aperture)?)
}

fn load_measurement(path: &Path) -> Result<SensorMeasurement> {
    let chans = io::load_image(path).with_context(|| format!("reading measurement {}", path.display()))?;
    Ok(SensorMeasurement::new(chans)?)
}

fn write_text(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn max_of(chans: &[Array2<f64>]) -> f64 {
    let m = chans.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(*v));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn save_recon(rec: &Reconstruction, png: &Path, pfm: Option<&Path>, trace: Option<&Path>, meta: &Value, prov: &Provenance) -> Result<()> {
    let scale = max_of(&rec.channels);
    io::save_png(png, &rec.channels, 16, scale)?;
    io::write_sidecar(png, json!({ "bit_depth": 16, "normalization": scale, "recon": meta }), prov)?;
    if let Some(p) = pfm {
        io::save_pfm(p, &rec.channels)?;
        io::write_sidecar(p, json!({ "recon": meta }), prov)?;
    }
    if let Some(t) = trace {
        let mut csv = Vec::new();
        rec.write_trace_csv(&mut csv)?;
        write_text(t, &csv)?;
    }
    Ok(())
}

fn mask_gen(a: MaskGenArgs) -> Result<()> {
    let geometry = MaskGeometry::new(a.size.0, a.size.1, a.pitch_um, a.aperture)?;
    let (image, kind) = match a.kind {
        MaskKind::Radial => {
            let p = a.params.as_ref().context("--params is required for radial masks")?;
            let params = RadialMaskParams::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            (mask::realize_radial(&params, geometry)?, "radial")
        }
        MaskKind::Star => (mask::gen_star_chart(a.sections, geometry)?, "star_chart"),
        MaskKind::Fza => (mask::gen_fza(mask::fza_beta_for_zones(&geometry, a.zones), geometry)?, "fza"),
        MaskKind::Random => (mask::gen_random(a.density, a.seed, geometry)?, "random"),
    };
    let params = json!({
        "command": "mask gen", "kind": kind, "size": [a.size.0, a.size.1], "pitch_um": a.pitch_um,
        "aperture": a.aperture, "params": a.params, "sections": a.sections, "zones": a.zones, "density": a.density,
    });
    let prov = provenance(&params, a.seed)?;
    let meta = json!({
        "kind": kind,
        "pitch_um": image.pitch_um,
        "aperture_fraction": image.aperture_fraction,
        "mean_transmittance": image.mean_in_aperture(),
    });
    io::save_pfm(&a.out, std::slice::from_ref(&image.grid))?;
    io::write_sidecar(&a.out, &meta, &prov)?;
    if let Some(png) = &a.png {
        io::save_png(png, std::slice::from_ref(&image.grid), 8, 1.0)?;
        io::write_sidecar(png, &meta, &prov)?;
    }
    println!("{kind} mask {}x{}, mean transmittance {:.4}", a.size.0, a.size.1, image.mean_in_aperture());
    Ok(())
}

fn mask_optimize(a: MaskOptimizeArgs) -> Result<()> {
    let cfg = OptimConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        grid_ny: a.size.0,
        grid_nx: a.size.1,
        n_sections: a.sections,
        aperture_fraction: a.aperture,
        ..OptimConfig::default()
    };
    let trace = optimizer::optimize(&cfg)?;
    write_text(&a.out, (trace.final_params.to_json()? + "\n").as_bytes())?;
    if let Some(t) = &a.trace {
        let mut csv = Vec::new();
        trace.write_csv(&mut csv)?;
        write_text(t, &csv)?;
    }
    println!(
        "loss {:.6} -> {:.6}, mean transmittance {:.4}, binarity {:.3}",
        trace.losses[0], trace.final_loss, trace.final_mean_transmittance, trace.binarity_fraction
    );
    Ok(())
}

fn psf_cmd(a: PsfArgs) -> Result<()> {
    let m = load_mask(&a.mask, a.sensor.pitch_um)?;
    let sensor = SensorGeometry::new(a.sensor.sensor.0, a.sensor.sensor.1, a.sensor.pitch_um)?;
    let psf = optics::project_psf(&m, a.depth_cm, a.sensor.dist_mm, sensor)?;
    let params = json!({
        "command": "psf", "mask": a.mask, "depth_cm": a.depth_cm, "sensor": [sensor.ny, sensor.nx],
        "pitch_um": sensor.pitch_um, "dist_mm": a.sensor.dist_mm,
    });
    io::save_psf(&a.out, &psf, a.sensor.dist_mm, &provenance(&params, 0)?)?;
    println!("psf at {} cm, magnification {:.6}", a.depth_cm, psf.mag);
    Ok(())
}

fn mtf_cmd(a: MtfArgs) -> Result<()> {
    let grid = single_channel(io::load_pfm(&a.input)?, &a.input)?;
    let spectrum = optics::mtf(&grid)?;
    let (ny, nx) = grid.dim();
    let bins = a.bins.unwrap_or((ny.min(nx) / 4).max(1));
    let profile = optics::radial_mtf_profile(&spectrum, bins)?;
    let mut csv = Vec::new();
    io::write_mtf_csv(&mut csv, &profile)?;
    write_text(&a.out, &csv)?;
    println!("mean mtf {:.6}", spectrum.mean());
    Ok(())
}

fn capture_cmd(a: CaptureArgs) -> Result<()> {
    let manifest: SceneManifest = io::read_json(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    let base = a.scene.parent().unwrap_or(Path::new("."));
    let loaded = manifest.load(base, a.sensor.sensor, a.channels)?;
    let psfs: Vec<Psf> = match &a.mask {
        Some(mpath) => {
            let m = load_mask(mpath, a.sensor.pitch_um)?;
            let sensor = SensorGeometry::new(a.sensor.sensor.0, a.sensor.sensor.1, a.sensor.pitch_um)?;
            loaded
                .scene
                .layers()
                .iter()
                .map(|l| optics::project_psf(&m, l.depth_cm, a.sensor.dist_mm, sensor))
                .collect::<radialens::Result<_>>()?
        }
        None if !a.psf.is_empty() => a.psf.iter().map(|p| io::load_psf(p).map(|(psf, _)| psf)).collect::<radialens::Result<_>>()?,
        None => bail!("either --mask or --psf is required"),
    };
    let noise = match (a.gaussian_sigma, a.poisson_scale) {
        (Some(sigma), _) => Some(NoiseModel::Gaussian { sigma }),
        (_, Some(scale)) => Some(NoiseModel::Poisson { scale }),
        _ => None,
    };
    let b = capture(&loaded.scene, &psfs, a.sensor.sensor, noise, a.seed)?;
    let params = json!({
        "command": "capture", "scene": manifest, "mask": a.mask, "psf": a.psf, "sensor": [a.sensor.sensor.0, a.sensor.sensor.1],
        "pitch_um": a.sensor.pitch_um, "dist_mm": a.sensor.dist_mm, "channels": a.channels, "noise": noise,
    });
    let prov = provenance(&params, a.seed)?;
    io::save_pfm(&a.out, &b.channels)?;
    io::write_sidecar(&a.out, json!({}), &prov)?;
    if let Some(png) = &a.png {
        let scale = max_of(&b.channels);
        io::save_png(png, &b.channels, 16, scale)?;
        io::write_sidecar(png, json!({ "bit_depth": 16, "normalization": scale }), &prov)?;
    }
    println!("measurement {}x{} with {} channels, peak {:.6e}", b.dim().0, b.dim().1, b.channels.len(), b.max());
    Ok(())
}

fn recon_admm(a: ReconAdmmArgs) -> Result<()> {
    let b = load_measurement(&a.measurement)?;
    let (psf, meta) = io::load_psf(&a.psf).with_context(|| format!("reading psf {}", a.psf.display()))?;
    let cfg = AdmmConfig {
        tau: a.solver.tau,
        rho: a.solver.rho,
        iterations: a.solver.iters,
        psf_depth_cm: meta.depth_cm,
    };
    let scene = a.scene_size.unwrap_or(b.dim());
    let rec = admm_solve_scene(&b, &psf, &cfg, scene)?;
    let params = json!({ "command": "recon admm", "measurement": a.measurement, "psf": a.psf, "admm": cfg, "scene": [scene.0, scene.1] });
    let prov = provenance(&params, 0)?;
    save_recon(&rec, &a.out, a.pfm.as_deref(), a.trace.as_deref(), &json!(cfg), &prov)?;
    let trace = rec.combined_trace();
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("objective {:.6e} -> {:.6e}", first.objective, last.objective);
    }
    Ok(())
}

fn refocus_cmd(a: RefocusArgs) -> Result<()> {
    let b = load_measurement(&a.measurement)?;
    let m = load_mask(&a.mask, a.sensor.pitch_um)?;
    let sensor = SensorGeometry::new(a.sensor.sensor.0, a.sensor.sensor.1, a.sensor.pitch_um)?;
    let cfg = AdmmConfig {
        tau: a.solver.tau,
        rho: a.solver.rho,
        iterations: a.solver.iters,
        ..AdmmConfig::default()
    };
    let results = refocus_sweep(&b, &m, &a.depths, a.sensor.dist_mm, sensor, &cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let params = json!({
        "command": "refocus", "measurement": a.measurement, "mask": a.mask, "depths": a.depths,
        "sensor": [sensor.ny, sensor.nx], "pitch_um": sensor.pitch_um, "dist_mm": a.sensor.dist_mm, "admm": cfg,
    });
    let prov = provenance(&params, 0)?;
    for (z, rec) in &results {
        let png = a.out_dir.join(format!("recon_{z}cm.png"));
        let pfm = a.out_dir.join(format!("recon_{z}cm.pfm"));
        let trace = a.out_dir.join(format!("residuals_{z}cm.csv"));
        let meta = json!({ "psf_depth_cm": z, "admm": cfg });
        save_recon(rec, &png, Some(&pfm), Some(&trace), &meta, &prov)?;
        println!("refocused at {z} cm -> {}", png.display());
    }
    Ok(())
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let r = io::load_image(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
    let mut t = io::load_image(&a.test).with_context(|| format!("reading {}", a.test.display()))?;
    if a.fit_gain {
        let g = metrics::fit_gain(&r, &t)?;
        t.iter_mut().for_each(|ch| *ch *= g);
    }
    let report = metrics::compare(&r, &t, a.peak)?;
    io::write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn experiment_run(a: ExperimentRunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config).with_context(|| format!("reading config {}", a.config.display()))?;
    if a.full_scale {
        cfg = cfg.scaled(4);
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let summary = run_experiment(&cfg, base, &out)?;
    println!("{:<12} {:>10} {:>8} {:>10} {:>12}", "mask", "psnr_db", "ssim", "mae", "psf_mae");
    for row in &summary.table {
        let psnr = row.near_psnr_db.db().map_or("identical".to_string(), |v| format!("{v:.2}"));
        println!("{:<12} {:>10} {:>8.4} {:>10.5} {:>12.4e}", row.mask, psnr, row.near_ssim, row.near_mae, row.psf_scale_mae);
    }
    println!("summary written to {}", out.join("summary.json").display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Mask(MaskCommand::Gen(a)) => mask_gen(a),
        Command::Mask(MaskCommand::Optimize(a)) => mask_optimize(a),
        Command::Psf(a) => psf_cmd(a),
        Command::Mtf(a) => mtf_cmd(a),
        Command::Capture(a) => capture_cmd(a),
        Command::Recon(ReconCommand::Admm(a)) => recon_admm(a),
        Command::Refocus(a) => refocus_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Experiment(ExperimentCommand::Run(a)) => experiment_run(a),
    }
}
