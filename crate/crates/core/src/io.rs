//! File formats: PFM, PNG, CSV and JSON sidecars.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optics::Psf;

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

fn check_channels(channels: &[Array2<f64>]) -> Result<(usize, usize)> {
    let first = channels.first().ok_or_else(|| format_err("image", "no channels"))?;
    let dim = first.dim();
    for ch in channels {
        crate::error::ensure_same_dim(dim, ch.dim())?;
    }
    if dim.0 == 0 || dim.1 == 0 {
        return Err(format_err("image", "empty image"));
    }
    Ok(dim)
}

/// Little-endian PFM: `Pf` for one channel, `PF` for three. Rows are stored
/// bottom to top.
pub fn write_pfm<W: Write>(mut out: W, channels: &[Array2<f64>]) -> Result<()> {
    let (h, w) = check_channels(channels)?;
    let magic = match channels.len() {
        1 => "Pf",
        3 => "PF",
        n => return Err(format_err("pfm", format!("{n} channels, need 1 or 3"))),
    };
    write!(out, "{magic}\n{w} {h}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(h * w * channels.len() * 4);
    for r in (0..h).rev() {
        for c in 0..w {
            for ch in channels {
                buf.extend_from_slice(&(ch[[r, c]] as f32).to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm<R: Read>(input: R) -> Result<Vec<Array2<f64>>> {
    let mut reader = BufReader::new(input);
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(format_err("pfm", "truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens.len() != 4 {
        return Err(format_err("pfm", "malformed header"));
    }
    let n = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format_err("pfm", format!("bad magic {m:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err("pfm", format!("bad dimension {s:?}")));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3].parse().map_err(|_| format_err("pfm", "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() || w == 0 || h == 0 {
        return Err(format_err("pfm", "bad scale or dimensions"));
    }
    let little = scale < 0.0;
    let mut data = vec![0u8; w * h * n * 4];
    reader.read_exact(&mut data).map_err(|_| format_err("pfm", "truncated pixel data"))?;
    let mut channels = vec![Array2::zeros((h, w)); n];
    for (i, px) in data.chunks_exact(4).enumerate() {
        let bytes = [px[0], px[1], px[2], px[3]];
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let k = i % n;
        let c = (i / n) % w;
        let r = h - 1 - i / (n * w);
        channels[k][[r, c]] = v as f64;
    }
    Ok(channels)
}

pub fn save_pfm(path: &Path, channels: &[Array2<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    write_pfm(&mut buf, channels)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Vec<Array2<f64>>> {
    read_pfm(fs::File::open(path)?)
}

/// Write 1 or 3 channels as PNG after dividing by `scale` and clamping to
/// `[0, 1]`.
pub fn save_png(path: &Path, channels: &[Array2<f64>], bit_depth: u8, scale: f64) -> Result<()> {
    let (h, w) = check_channels(channels)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(format_err("png", format!("bad normalization {scale}")));
    }
    let n = channels.len();
    if n != 1 && n != 3 {
        return Err(format_err("png", format!("{n} channels, need 1 or 3")));
    }
    let sample = |r: usize, c: usize, k: usize| (channels[k][[r, c]] / scale).clamp(0.0, 1.0);
    let (wu, hu) = (w as u32, h as u32);
    match (bit_depth, n) {
        (8, 1) => image::GrayImage::from_fn(wu, hu, |c, r| image::Luma([(sample(r as usize, c as usize, 0) * 255.0).round() as u8])).save(path)?,
        (8, 3) => image::RgbImage::from_fn(wu, hu, |c, r| {
            image::Rgb([0, 1, 2].map(|k| (sample(r as usize, c as usize, k) * 255.0).round() as u8))
        })
        .save(path)?,
        (16, 1) => image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(wu, hu, |c, r| {
            image::Luma([(sample(r as usize, c as usize, 0) * 65535.0).round() as u16])
        })
        .save(path)?,
        (16, 3) => image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_fn(wu, hu, |c, r| {
            image::Rgb([0, 1, 2].map(|k| (sample(r as usize, c as usize, k) * 65535.0).round() as u16))
        })
        .save(path)?,
        (b, _) => return Err(format_err("png", format!("bit depth {b}, need 8 or 16"))),
    }
    Ok(())
}

/// Load a PNG as channels in `[0, 1]`. Gray images give one channel, color
/// images three (alpha dropped).
pub fn load_png(path: &Path) -> Result<Vec<Array2<f64>>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16);
    if gray {
        let buf = img.into_luma16();
        Ok(vec![Array2::from_shape_fn((h, w), |(r, c)| buf.get_pixel(c as u32, r as u32)[0] as f64 / 65535.0)])
    } else {
        let buf = img.into_rgb16();
        Ok((0..3)
            .map(|k| Array2::from_shape_fn((h, w), |(r, c)| buf.get_pixel(c as u32, r as u32)[k] as f64 / 65535.0))
            .collect())
    }
}

/// Load an image by extension (`.pfm` or anything `image` reads).
pub fn load_image(path: &Path) -> Result<Vec<Array2<f64>>> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pfm") => load_pfm(path),
        _ => load_png(path),
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            tool: "radialens".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(config)?,
            seed,
        })
    }
}

/// Sidecar path for an artifact: `name.ext` -> `name.ext.json`.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Sidecar body: provenance plus artifact-specific fields flattened in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<T> {
    #[serde(flatten)]
    pub fields: T,
    pub provenance: Provenance,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_sidecar<T: Serialize>(artifact: &Path, fields: T, provenance: &Provenance) -> Result<()> {
    write_json(
        &sidecar_path(artifact),
        &Sidecar {
            fields,
            provenance: provenance.clone(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfMeta {
    pub depth_cm: f64,
    pub mask_sensor_dist_mm: f64,
    pub mag: f64,
}

pub fn save_psf(path: &Path, psf: &Psf, mask_sensor_dist_mm: f64, provenance: &Provenance) -> Result<()> {
    save_pfm(path, std::slice::from_ref(psf.kernel()))?;
    let meta = PsfMeta {
        depth_cm: psf.depth_cm,
        mask_sensor_dist_mm,
        mag: psf.mag,
    };
    write_sidecar(path, meta, provenance)
}

/// Load a PSF and its sidecar; the kernel is renormalized after the f32
/// round trip.
pub fn load_psf(path: &Path) -> Result<(Psf, PsfMeta)> {
    let mut chans = load_pfm(path)?;
    if chans.len() != 1 {
        return Err(format_err("psf", "expected a single-channel PFM"));
    }
    let meta: PsfMeta = read_json(&sidecar_path(path))?;
    let psf = Psf::new(chans.remove(0), meta.depth_cm, meta.mag)?;
    Ok((psf, meta))
}

/// Write `freq_over_nyquist,mean_mtf`.
pub fn write_mtf_csv<W: Write>(out: W, profile: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["freq_over_nyquist", "mean_mtf"])?;
    for (f, m) in profile {
        w.write_record([f.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
