//! Config-driven pipeline: mask -> PSF -> capture -> recon -> metrics.
//!
//! Every binary artifact gets a `<file>.json` sidecar with provenance. The
//! summary JSON holds the per-mask metric grid; near/far refer to the
//! smallest/largest layer depth.

use ndarray::{s, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::forward::{capture, Layer, NoiseModel, Scene, SensorMeasurement};
use crate::io::{self, Provenance};
use crate::mask::{self, MaskGeometry, MaskImage, RadialMaskParams, DEFAULT_APERTURE_FRACTION};
use crate::metrics::{self, MetricReport, Psnr};
use crate::optics::{self, magnification, Psf, SensorGeometry};
use crate::optimizer::{self, OptimConfig};
use crate::recon::{admm_solve_scene, AdmmConfig};
use crate::scenes;

pub const BUILTIN_PREFIX: &str = "builtin:";

/// Fixed texture seed of the built-in toy chart; it is an asset, not a
/// random draw of the experiment.
const TOY_ASSET_SEED: u64 = 7;

fn default_aperture() -> f64 {
    DEFAULT_APERTURE_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub sensor_ny: usize,
    pub sensor_nx: usize,
    pub sensor_pitch_um: f64,
    /// Defaults to the sensor pitch; the mask grid always matches the sensor dims.
    #[serde(default)]
    pub mask_pitch_um: Option<f64>,
    pub mask_sensor_dist_mm: f64,
    #[serde(default = "default_aperture")]
    pub aperture_fraction: f64,
}

impl GeometryConfig {
    pub fn sensor(&self) -> Result<SensorGeometry> {
        SensorGeometry::new(self.sensor_ny, self.sensor_nx, self.sensor_pitch_um)
    }

    pub fn mask_geometry(&self) -> Result<MaskGeometry> {
        MaskGeometry::new(
            self.sensor_ny,
            self.sensor_nx,
            self.mask_pitch_um.unwrap_or(self.sensor_pitch_um),
            self.aperture_fraction,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor()?;
        self.mask_geometry()?;
        if !(self.mask_sensor_dist_mm > 0.0 && self.mask_sensor_dist_mm.is_finite()) {
            return Err(invalid("mask_sensor_dist_mm", format!("{} must be positive", self.mask_sensor_dist_mm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub depth_cm: f64,
    /// Image path (relative to the config file) or `builtin:toy` / `builtin:ou`.
    pub image: String,
    /// Columns `[start, end)` this layer is scored on; defaults to the
    /// column extent of its nonzero pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub layers: Vec<LayerSpec>,
}

pub struct LoadedScene {
    pub scene: Scene,
    pub regions: Vec<(usize, usize)>,
}

fn load_layer_image(spec: &LayerSpec, base_dir: &Path, dim: (usize, usize), channels: usize) -> Result<Vec<Array2<f64>>> {
    match spec.image.strip_prefix(BUILTIN_PREFIX) {
        Some("toy") => scenes::plush_toy(dim.0, dim.1, channels, TOY_ASSET_SEED),
        Some("ou") => Ok(vec![scenes::ou_glyphs(dim.0, dim.1)?; channels]),
        Some(other) => Err(invalid("image", format!("unknown built-in {other:?}"))),
        None => io::load_image(&base_dir.join(&spec.image)),
    }
}

fn support_columns(channels: &[Array2<f64>]) -> (usize, usize) {
    let nx = channels[0].ncols();
    let used: Vec<usize> = (0..nx)
        .filter(|&c| channels.iter().any(|ch| ch.column(c).iter().any(|v| *v > 0.0)))
        .collect();
    match (used.first(), used.last()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => (0, nx),
    }
}

impl SceneManifest {
    /// Check that file references resolve, without loading them.
    pub fn check_files(&self, base_dir: &Path) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("layers", "scene needs at least one layer"));
        }
        for l in &self.layers {
            if !l.image.starts_with(BUILTIN_PREFIX) && !base_dir.join(&l.image).is_file() {
                return Err(invalid("image", format!("{} not found", base_dir.join(&l.image).display())));
            }
        }
        Ok(())
    }

    /// Load all layers. Built-ins are rendered at `builtin_dim` with
    /// `builtin_channels` channels; single-channel layers are broadcast to
    /// match color ones.
    pub fn load(&self, base_dir: &Path, builtin_dim: (usize, usize), builtin_channels: usize) -> Result<LoadedScene> {
        self.check_files(base_dir)?;
        let mut images = self
            .layers
            .iter()
            .map(|l| load_layer_image(l, base_dir, builtin_dim, builtin_channels))
            .collect::<Result<Vec<_>>>()?;
        let n = images.iter().map(Vec::len).max().unwrap_or(1);
        for img in &mut images {
            if img.len() == 1 && n > 1 {
                *img = vec![img[0].clone(); n];
            }
        }
        let regions = self
            .layers
            .iter()
            .zip(&images)
            .map(|(l, img)| match l.region {
                Some([a, b]) if a < b && b <= img[0].ncols() => Ok((a, b)),
                Some(r) => Err(invalid("region", format!("{r:?} outside image width {}", img[0].ncols()))),
                None => Ok(support_columns(img)),
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = self
            .layers
            .iter()
            .zip(images)
            .map(|(l, channels)| Layer {
                depth_cm: l.depth_cm,
                channels,
            })
            .collect();
        Ok(LoadedScene {
            scene: Scene::new(layers)?,
            regions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Optimized radial mask, or fixed parameters loaded from `params`.
    Radial {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<PathBuf>,
        #[serde(default)]
        optimizer: OptimConfig,
    },
    StarChart {
        sections: usize,
    },
    /// Binary FZA with `zones` full periods inside the aperture radius.
    Fza {
        zones: f64,
    },
    Random {
        density: f64,
    },
    /// Pinhole stub: a unit 1x1 PSF at every depth.
    Impulse,
}

impl MaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            MaskSpec::Radial { .. } => "radial",
            MaskSpec::StarChart { .. } => "star_chart",
            MaskSpec::Fza { .. } => "fza",
            MaskSpec::Random { .. } => "random",
            MaskSpec::Impulse => "impulse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub spec: MaskSpec,
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub scene: SceneManifest,
    pub masks: Vec<MaskEntry>,
    #[serde(default)]
    pub recon: AdmmConfig,
    /// Extra PSF depths to reconstruct with, besides `recon.psf_depth_cm`.
    #[serde(default)]
    pub refocus_depths_cm: Vec<f64>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    #[serde(default = "default_channels")]
    pub builtin_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for m in &self.masks {
            let base = m.label.clone().unwrap_or_else(|| m.spec.kind().to_string());
            let mut label = base.clone();
            let mut k = 2;
            while seen.contains(&label) {
                label = format!("{base}_{k}");
                k += 1;
            }
            seen.push(label);
        }
        seen
    }

    /// Depths the reconstruction is run at, calibration depth first.
    pub fn focus_depths(&self) -> Vec<f64> {
        let mut depths = vec![self.recon.psf_depth_cm];
        for &z in &self.refocus_depths_cm {
            if !depths.contains(&z) {
                depths.push(z);
            }
        }
        depths
    }

    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        self.geometry.validate()?;
        self.recon.validate()?;
        if self.masks.is_empty() {
            return Err(invalid("masks", "need at least one mask"));
        }
        if self.builtin_channels == 0 {
            return Err(invalid("builtin_channels", "must be at least 1"));
        }
        for z in self.focus_depths().into_iter().chain(self.scene.layers.iter().map(|l| l.depth_cm)) {
            magnification(z, self.geometry.mask_sensor_dist_mm)?;
        }
        for m in &self.masks {
            match &m.spec {
                MaskSpec::Radial { params, optimizer } => {
                    optimizer.validate()?;
                    if let Some(p) = params {
                        if !base_dir.join(p).is_file() {
                            return Err(invalid("params", format!("{} not found", base_dir.join(p).display())));
                        }
                    }
                }
                MaskSpec::Fza { zones } if !(*zones > 0.0 && zones.is_finite()) => {
                    return Err(invalid("zones", format!("{zones} must be positive")));
                }
                _ => {}
            }
        }
        self.scene.check_files(base_dir)
    }

    /// Scale the sensor grid by `factor` at constant physical size (pitch
    /// divided by `factor`); explicit scoring regions scale along.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut cfg = self.clone();
        let f = factor as f64;
        cfg.geometry.sensor_ny *= factor;
        cfg.geometry.sensor_nx *= factor;
        cfg.geometry.sensor_pitch_um /= f;
        cfg.geometry.mask_pitch_um = cfg.geometry.mask_pitch_um.map(|p| p / f);
        for l in &mut cfg.scene.layers {
            l.region = l.region.map(|[a, b]| [a * factor, b * factor]);
        }
        cfg
    }
}

/// Independent sub-seed number `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Round to the 16-bit grid the PNG outputs use, after clamping to `[0, 1]`.
pub fn quantize16(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub depth_cm: f64,
    pub region: [usize; 2],
    pub gain: f64,
    pub metrics: MetricReport,
}

/// Score each layer on its region: fit a gain, quantize to 16 bits, compare.
pub fn score_layers(scene: &Scene, regions: &[(usize, usize)], recon: &[Array2<f64>]) -> Result<Vec<LayerScore>> {
    scene
        .layers()
        .iter()
        .zip(regions)
        .map(|(layer, &(a, b))| {
            let crop = |imgs: &[Array2<f64>]| -> Vec<Array2<f64>> { imgs.iter().map(|im| im.slice(s![.., a..b]).to_owned()).collect() };
            let truth = crop(&layer.channels);
            let test = crop(recon);
            let gain = metrics::fit_gain(&truth, &test)?;
            let test: Vec<_> = test.iter().map(|t| t.mapv(|v| quantize16(v * gain))).collect();
            Ok(LayerScore {
                depth_cm: layer.depth_cm,
                region: [a, b],
                gain,
                metrics: metrics::compare(&truth, &test, 1.0)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusResult {
    pub psf_depth_cm: f64,
    pub objective_first: f64,
    pub objective_last: f64,
    pub layers: Vec<LayerScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    pub label: String,
    pub kind: String,
    pub mean_transmittance: f64,
    pub mean_mtf: f64,
    /// MAE between the far- and near-layer PSFs.
    pub psf_scale_mae: f64,
    pub focus: Vec<FocusResult>,
}

impl MaskResult {
    pub fn at_focus(&self, psf_depth_cm: f64) -> Option<&FocusResult> {
        self.focus.iter().find(|f| f.psf_depth_cm == psf_depth_cm)
    }
}

impl FocusResult {
    pub fn layer(&self, depth_cm: f64) -> Option<&LayerScore> {
        self.layers.iter().find(|l| l.depth_cm == depth_cm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mask: String,
    pub near_psnr_db: Psnr,
    pub near_ssim: f64,
    pub near_mae: f64,
    pub psf_scale_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub provenance: Provenance,
    pub calibration_depth_cm: f64,
    pub near_depth_cm: f64,
    pub far_depth_cm: f64,
    pub masks: Vec<MaskResult>,
    /// Near-layer metrics at the calibration depth, one row per mask.
    pub table: Vec<TableRow>,
}

impl ExperimentSummary {
    pub fn mask(&self, label: &str) -> Option<&MaskResult> {
        self.masks.iter().find(|m| m.label == label)
    }
}

/// Writes artifacts under a root directory and records what was written.
struct Recorder<'a> {
    root: PathBuf,
    provenance: &'a Provenance,
    produced: Vec<String>,
}

impl<'a> Recorder<'a> {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.produced.push(rel.to_string());
        Ok(p)
    }

    fn sidecar<T: Serialize>(&mut self, rel: &str, fields: T) -> Result<()> {
        let p = self.path(rel)?;
        self.produced.pop();
        io::write_sidecar(&p, fields, self.provenance)?;
        self.produced.push(format!("{rel}.json"));
        Ok(())
    }

    fn pfm<T: Serialize>(&mut self, rel: &str, channels: &[Array2<f64>], fields: T) -> Result<()> {
        let p = self.path(rel)?;
        io::save_pfm(&p, channels)?;
        self.sidecar(rel, fields)
    }

    /// 16-bit PNG normalized by `scale`, recorded in the sidecar.
    fn png<T: Serialize>(&mut self, rel: &str, channels: &[Array2<f64>], bit_depth: u8, scale: f64, fields: T) -> Result<()> {
        let p = self.path(rel)?;
        io::save_png(&p, channels, bit_depth, scale)?;
        #[derive(Serialize)]
        struct Png<T> {
            bit_depth: u8,
            normalization: f64,
            #[serde(flatten)]
            fields: T,
        }
        self.sidecar(
            rel,
            Png {
                bit_depth,
                normalization: scale,
                fields,
            },
        )
    }

    fn text(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, bytes)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Empty {}

fn depth_tag(z: f64) -> String {
    format!("{z}cm")
}

fn in_stage<T>(stage: &str, r: Result<T>) -> std::result::Result<T, (String, Error)> {
    r.map_err(|e| (stage.to_string(), e))
}

struct MaskRun<'a> {
    cfg: &'a ExperimentConfig,
    base_dir: &'a Path,
    loaded: &'a LoadedScene,
    label: &'a str,
    index: usize,
}

impl MaskRun<'_> {
    fn realize(&self, rec: &mut Recorder) -> Result<Option<MaskImage>> {
        let geometry = self.cfg.geometry.mask_geometry()?;
        let dir = self.label;
        let image = match &self.cfg.masks[self.index].spec {
            MaskSpec::Impulse => return Ok(None),
            MaskSpec::Radial { params, optimizer } => {
                let params = match params {
                    Some(p) => RadialMaskParams::from_json(&fs::read_to_string(self.base_dir.join(p))?)?,
                    None => {
                        let ocfg = OptimConfig {
                            seed: derive_seed(self.cfg.seed, 2 * self.index as u64),
                            ..optimizer.clone()
                        };
                        let trace = optimizer::optimize(&ocfg)?;
                        let mut csv = Vec::new();
                        trace.write_csv(&mut csv)?;
                        rec.text(&format!("{dir}/trace.csv"), &csv)?;
                        trace.final_params
                    }
                };
                rec.text(&format!("{dir}/params.json"), (params.to_json()? + "\n").as_bytes())?;
                mask::realize_radial(&params, geometry)?
            }
            MaskSpec::StarChart { sections } => mask::gen_star_chart(*sections, geometry)?,
            MaskSpec::Fza { zones } => mask::gen_fza(mask::fza_beta_for_zones(&geometry, *zones), geometry)?,
            MaskSpec::Random { density } => mask::gen_random(*density, derive_seed(self.cfg.seed, 2 * self.index as u64 + 1), geometry)?,
        };
        #[derive(Serialize)]
        struct MaskMeta {
            kind: &'static str,
            pitch_um: f64,
            aperture_fraction: f64,
            mean_transmittance: f64,
        }
        let meta = MaskMeta {
            kind: self.cfg.masks[self.index].spec.kind(),
            pitch_um: image.pitch_um,
            aperture_fraction: image.aperture_fraction,
            mean_transmittance: image.mean_in_aperture(),
        };
        rec.pfm(&format!("{dir}/mask.pfm"), std::slice::from_ref(&image.grid), &meta)?;
        rec.png(&format!("{dir}/mask.png"), std::slice::from_ref(&image.grid), 8, 1.0, &meta)?;
        Ok(Some(image))
    }

    fn psf(&self, mask: &Option<MaskImage>, depth_cm: f64) -> Result<Psf> {
        let d = self.cfg.geometry.mask_sensor_dist_mm;
        match mask {
            Some(m) => optics::project_psf(m, depth_cm, d, self.cfg.geometry.sensor()?),
            None => Psf::new(Array2::ones((1, 1)), depth_cm, magnification(depth_cm, d)?),
        }
    }

    fn run(&self, rec: &mut Recorder) -> std::result::Result<MaskResult, (String, Error)> {
        let label = self.label;
        let cfg = self.cfg;
        let mask = in_stage(&format!("mask:{label}"), self.realize(rec))?;

        let psf_stage = format!("psf:{label}");
        let layer_depths: Vec<f64> = self.loaded.scene.layers().iter().map(|l| l.depth_cm).collect();
        let mut all_depths = layer_depths.clone();
        for z in cfg.focus_depths() {
            if !all_depths.contains(&z) {
                all_depths.push(z);
            }
        }
        let mut psfs = Vec::new();
        for &z in &all_depths {
            let psf = in_stage(&psf_stage, self.psf(&mask, z))?;
            let meta = io::PsfMeta {
                depth_cm: z,
                mask_sensor_dist_mm: cfg.geometry.mask_sensor_dist_mm,
                mag: psf.mag,
            };
            in_stage(&psf_stage, rec.pfm(&format!("{label}/psf_{}.pfm", depth_tag(z)), std::slice::from_ref(psf.kernel()), meta))?;
            psfs.push(psf);
        }
        let near = layer_depths.iter().cloned().fold(f64::INFINITY, f64::min);
        let far = layer_depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pick = |z: f64| psfs.iter().find(|p| p.depth_cm == z).expect("psf projected for every depth");
        let mtf_stage = format!("mtf:{label}");
        let (mean_mtf, psf_scale_mae) = in_stage(&mtf_stage, (|| -> Result<(f64, f64)> {
            let mae = optics::psf_scale_mae(pick(far), pick(near))?;
            let Some(m) = &mask else { return Ok((1.0, mae)) };
            let spectrum = optics::mtf(&m.grid)?;
            let (ny, nx) = m.dim();
            let profile = optics::radial_mtf_profile(&spectrum, (ny.min(nx) / 4).max(1))?;
            let mut csv = Vec::new();
            io::write_mtf_csv(&mut csv, &profile)?;
            rec.text(&format!("{label}/mtf.csv"), &csv)?;
            Ok((spectrum.mean(), mae))
        })())?;

        let cap_stage = format!("capture:{label}");
        let sensor_dim = (cfg.geometry.sensor_ny, cfg.geometry.sensor_nx);
        let b: SensorMeasurement = in_stage(
            &cap_stage,
            capture(&self.loaded.scene, &psfs, sensor_dim, cfg.noise, derive_seed(cfg.seed, 1000 + self.index as u64)),
        )?;
        let peak = if b.max() > 0.0 { b.max() } else { 1.0 };
        in_stage(&cap_stage, rec.pfm(&format!("{label}/measurement.pfm"), &b.channels, Empty {}))?;
        in_stage(&cap_stage, rec.png(&format!("{label}/measurement.png"), &b.channels, 16, peak, Empty {}))?;

        let mut focus = Vec::new();
        for z in cfg.focus_depths() {
            let stage = format!("recon:{label}@{}", depth_tag(z));
            let rcfg = AdmmConfig {
                psf_depth_cm: z,
                ..cfg.recon.clone()
            };
            let r = in_stage(&stage, admm_solve_scene(&b, pick(z), &rcfg, self.loaded.scene.dim()))?;
            let tag = depth_tag(z);
            #[derive(Serialize)]
            struct ReconMeta<'a> {
                psf_depth_cm: f64,
                admm: &'a AdmmConfig,
            }
            let meta = ReconMeta {
                psf_depth_cm: z,
                admm: &rcfg,
            };
            let rmax = r.channels.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(*v));
            in_stage(&stage, (|| -> Result<()> {
                rec.pfm(&format!("{label}/recon_{tag}.pfm"), &r.channels, &meta)?;
                rec.png(&format!("{label}/recon_{tag}.png"), &r.channels, 16, if rmax > 0.0 { rmax } else { 1.0 }, &meta)?;
                let mut csv = Vec::new();
                r.write_trace_csv(&mut csv)?;
                rec.text(&format!("{label}/residuals_{tag}.csv"), &csv)
            })())?;
            let trace = r.combined_trace();
            let layers = in_stage(&format!("metrics:{label}@{tag}"), score_layers(&self.loaded.scene, &self.loaded.regions, &r.channels))?;
            focus.push(FocusResult {
                psf_depth_cm: z,
                objective_first: trace.first().map_or(0.0, |t| t.objective),
                objective_last: trace.last().map_or(0.0, |t| t.objective),
                layers,
            });
        }

        Ok(MaskResult {
            label: label.to_string(),
            kind: cfg.masks[self.index].spec.kind().to_string(),
            mean_transmittance: mask.as_ref().map_or(1.0, MaskImage::mean_in_aperture),
            mean_mtf,
            psf_scale_mae,
            focus,
        })
    }
}

/// Run the whole pipeline, writing artifacts under `out_dir`. Relative file
/// references in the config resolve against `base_dir`.
///
/// On failure the error names the stage, and `manifest.json` lists what was
/// written before it.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<ExperimentSummary> {
    let stage_err = |stage: &str, source: Error, produced: Vec<String>| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(source),
        produced,
    };
    cfg.validate(base_dir).map_err(|e| stage_err("config", e, vec![]))?;
    fs::create_dir_all(out_dir)?;
    let provenance = Provenance::new(cfg, cfg.seed)?;
    let mut rec = Recorder {
        root: out_dir.to_path_buf(),
        provenance: &provenance,
        produced: Vec::new(),
    };

    let loaded = cfg
        .scene
        .load(base_dir, (cfg.geometry.sensor_ny, cfg.geometry.sensor_nx), cfg.builtin_channels)
        .map_err(|e| stage_err("scene", e, vec![]))?;
    let truth_written = (|| -> Result<()> {
        let mut total: Vec<Array2<f64>> = vec![Array2::zeros(loaded.scene.dim()); loaded.scene.n_channels()];
        for layer in loaded.scene.layers() {
            for (t, ch) in total.iter_mut().zip(&layer.channels) {
                *t += ch;
            }
            #[derive(Serialize)]
            struct LayerMeta {
                depth_cm: f64,
            }
            let meta = LayerMeta { depth_cm: layer.depth_cm };
            let tag = depth_tag(layer.depth_cm);
            rec.png(&format!("scene/layer_{tag}.png"), &layer.channels, 16, 1.0, &meta)?;
        }
        rec.png("scene/truth.png", &total, 16, 1.0, Empty {})
    })();
    if let Err(e) = truth_written {
        write_manifest(out_dir, &rec.produced)?;
        return Err(stage_err("scene", e, rec.produced));
    }

    let labels = cfg.labels();
    let outcomes: Vec<_> = labels
        .par_iter()
        .enumerate()
        .map(|(index, label)| {
            let mut local = Recorder {
                root: out_dir.to_path_buf(),
                provenance: &provenance,
                produced: Vec::new(),
            };
            let run = MaskRun {
                cfg,
                base_dir,
                loaded: &loaded,
                label,
                index,
            };
            let result = run.run(&mut local);
            (result, local.produced)
        })
        .collect();

    let mut masks = Vec::new();
    let mut failure = None;
    for (result, produced) in outcomes {
        rec.produced.extend(produced);
        match result {
            Ok(m) => masks.push(m),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    if let Some((stage, e)) = failure {
        write_manifest(out_dir, &rec.produced)?;
        return Err(stage_err(&stage, e, rec.produced));
    }

    let depths: Vec<f64> = loaded.scene.layers().iter().map(|l| l.depth_cm).collect();
    let near = depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let far = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let calib = cfg.recon.psf_depth_cm;
    let table = masks
        .iter()
        .map(|m| {
            let score = m.at_focus(calib).and_then(|f| f.layer(near)).expect("calibration focus is always reconstructed");
            TableRow {
                mask: m.label.clone(),
                near_psnr_db: score.metrics.psnr_db,
                near_ssim: score.metrics.ssim,
                near_mae: score.metrics.mae,
                psf_scale_mae: m.psf_scale_mae,
            }
        })
        .collect();
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        provenance: provenance.clone(),
        calibration_depth_cm: calib,
        near_depth_cm: near,
        far_depth_cm: far,
        masks,
        table,
    };
    io::write_json(&out_dir.join("summary.json"), &summary)?;
    rec.produced.push("summary.json".into());
    write_manifest(out_dir, &rec.produced)?;
    Ok(summary)
}

fn write_manifest(out_dir: &Path, produced: &[String]) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        artifacts: &'a [String],
    }
    io::write_json(&out_dir.join("manifest.json"), &Manifest { artifacts: produced })
}
