//! Coded amplitude masks.
//!
//! Every mask kind is realized as a [`MaskImage`]: a transmittance grid in
//! `[0, 1]` behind a central circular aperture. Radial masks are described by
//! a [`RadialMaskParams`] vector with one raw (pre-sigmoid) value per angular
//! section; the grid realization assigns each pixel to a section by its polar
//! angle about the grid center.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};

/// Aperture diameter (as a fraction of the shorter grid side) whose disk
/// covers half of a square grid: `sqrt(2 / pi)`.
pub const DEFAULT_APERTURE_FRACTION: f64 = 0.797_884_560_802_865_4;

/// Section count used for the optimized mask.
pub const DEFAULT_SECTIONS: usize = 70;

/// Side length of the grid used for mask optimization.
pub const DEFAULT_OPTIM_GRID: usize = 140;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw per-section values of a radial mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RadialMaskParamsRepr", into = "RadialMaskParamsRepr")]
pub struct RadialMaskParams {
    raw_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RadialMaskParamsRepr {
    n_sections: usize,
    raw_values: Vec<f64>,
}

impl TryFrom<RadialMaskParamsRepr> for RadialMaskParams {
    type Error = Error;

    fn try_from(repr: RadialMaskParamsRepr) -> Result<Self> {
        if repr.raw_values.len() != repr.n_sections {
            return Err(invalid(
                "raw_values",
                format!("{} values for {} sections", repr.raw_values.len(), repr.n_sections),
            ));
        }
        Self::new(repr.raw_values)
    }
}

impl From<RadialMaskParams> for RadialMaskParamsRepr {
    fn from(p: RadialMaskParams) -> Self {
        Self {
            n_sections: p.raw_values.len(),
            raw_values: p.raw_values,
        }
    }
}

impl RadialMaskParams {
    pub fn new(raw_values: Vec<f64>) -> Result<Self> {
        if raw_values.is_empty() {
            return Err(invalid("n_sections", "must be positive"));
        }
        if let Some(k) = raw_values.iter().position(|v| !v.is_finite()) {
            return Err(invalid("raw_values", format!("section {k} is not finite")));
        }
        Ok(Self { raw_values })
    }

    pub fn uniform(n_sections: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_sections])
    }

    pub fn n_sections(&self) -> usize {
        self.raw_values.len()
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.raw_values
    }

    /// Per-section transmittance `sigmoid(raw)`.
    pub fn transmittance(&self) -> Vec<f64> {
        self.raw_values.iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Pixel grid and aperture shared by all mask generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskGeometry {
    pub ny: usize,
    pub nx: usize,
    /// Physical pixel pitch in micrometers.
    pub pitch_um: f64,
    /// Unshielded aperture diameter as a fraction of `min(ny, nx)`.
    pub aperture_fraction: f64,
}

impl MaskGeometry {
    pub fn new(ny: usize, nx: usize, pitch_um: f64, aperture_fraction: f64) -> Result<Self> {
        let g = Self {
            ny,
            nx,
            pitch_um,
            aperture_fraction,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square grid with unit pitch and the default aperture.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, DEFAULT_APERTURE_FRACTION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ny < 2 || self.nx < 2 {
            return Err(Error::DegenerateGrid {
                ny: self.ny,
                nx: self.nx,
                min: 2,
            });
        }
        if !(self.aperture_fraction > 0.0 && self.aperture_fraction <= 1.0) {
            return Err(invalid("aperture_fraction", format!("{} not in (0, 1]", self.aperture_fraction)));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(invalid("pitch_um", format!("{} must be positive", self.pitch_um)));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.ny as f64 - 1.0) / 2.0, (self.nx as f64 - 1.0) / 2.0)
    }

    /// Aperture radius in pixels.
    pub fn aperture_radius_px(&self) -> f64 {
        self.aperture_fraction * self.ny.min(self.nx) as f64 / 2.0
    }

    /// Offset of pixel `(row, col)` from the grid center in pixels, with
    /// `dy` pointing up.
    pub fn offset(&self, row: usize, col: usize) -> (f64, f64) {
        let (cy, cx) = self.center();
        (col as f64 - cx, cy - row as f64)
    }

    pub fn in_aperture(&self, row: usize, col: usize) -> bool {
        let (dx, dy) = self.offset(row, col);
        dx.hypot(dy) <= self.aperture_radius_px()
    }

    pub fn aperture(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.ny, self.nx), |(r, c)| self.in_aperture(r, c))
    }
}

/// Section index for a point at offset `(dx, dy)`; the origin maps to 0.
pub fn section_of(dx: f64, dy: f64, n_sections: usize) -> usize {
    let mut phi = dy.atan2(dx);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let k = (phi * n_sections as f64 / (2.0 * PI)).floor() as usize;
    k.min(n_sections - 1)
}

/// Pixel-to-section assignment of a radial mask on a fixed geometry.
#[derive(Debug, Clone)]
pub struct SectionMap {
    geometry: MaskGeometry,
    n_sections: usize,
    /// Section per pixel, `None` outside the aperture.
    sections: Array2<Option<usize>>,
}

impl SectionMap {
    pub fn new(geometry: MaskGeometry, n_sections: usize) -> Result<Self> {
        geometry.validate()?;
        if n_sections == 0 {
            return Err(invalid("n_sections", "must be positive"));
        }
        let sections = Array2::from_shape_fn((geometry.ny, geometry.nx), |(r, c)| {
            geometry.in_aperture(r, c).then(|| {
                let (dx, dy) = geometry.offset(r, c);
                section_of(dx, dy, n_sections)
            })
        });
        Ok(Self {
            geometry,
            n_sections,
            sections,
        })
    }

    pub fn geometry(&self) -> &MaskGeometry {
        &self.geometry
    }

    pub fn n_sections(&self) -> usize {
        self.n_sections
    }

    pub fn sections(&self) -> &Array2<Option<usize>> {
        &self.sections
    }

    /// Paint per-section values onto the grid; shielded pixels are 0.
    pub fn paint(&self, values: &[f64]) -> Array2<f64> {
        assert_eq!(values.len(), self.n_sections);
        self.sections.mapv(|s| s.map_or(0.0, |k| values[k]))
    }

    /// Adjoint of [`SectionMap::paint`]: sum pixel values per section.
    pub fn gather(&self, pixels: &Array2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sections];
        for (s, v) in self.sections.iter().zip(pixels.iter()) {
            if let Some(k) = s {
                out[*k] += v;
            }
        }
        out
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_sections];
        for k in self.sections.iter().flatten() {
            out[*k] += 1;
        }
        out
    }
}

/// Transmittance grid of a coded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub grid: Array2<f64>,
    pub pitch_um: f64,
    pub aperture_fraction: f64,
}

impl MaskImage {
    /// Wrap an arbitrary grid, clamping values to `[0, 1]` and shielding
    /// everything outside the aperture.
    pub fn from_grid(grid: Array2<f64>, pitch_um: f64, aperture_fraction: f64) -> Result<Self> {
        let (ny, nx) = grid.dim();
        let geometry = MaskGeometry::new(ny, nx, pitch_um, aperture_fraction)?;
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid", "contains non-finite values"));
        }
        let mut grid = grid.mapv(|v| v.clamp(0.0, 1.0));
        grid.indexed_iter_mut().for_each(|((r, c), v)| {
            if !geometry.in_aperture(r, c) {
                *v = 0.0;
            }
        });
        Ok(Self {
            grid,
            pitch_um,
            aperture_fraction,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn geometry(&self) -> MaskGeometry {
        let (ny, nx) = self.dim();
        MaskGeometry {
            ny,
            nx,
            pitch_um: self.pitch_um,
            aperture_fraction: self.aperture_fraction,
        }
    }

    /// Mean transmittance over the unshielded aperture.
    pub fn mean_in_aperture(&self) -> f64 {
        let g = self.geometry();
        let (sum, n) = self
            .grid
            .indexed_iter()
            .filter(|((r, c), _)| g.in_aperture(*r, *c))
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn realize_radial(params: &RadialMaskParams, geometry: MaskGeometry) -> Result<MaskImage> {
    realize_sections(&params.transmittance(), geometry)
}

/// Realize explicit per-section transmittances (each in `[0, 1]`).
pub fn realize_sections(values: &[f64], geometry: MaskGeometry) -> Result<MaskImage> {
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("values", "section transmittance outside [0, 1]"));
    }
    let map = SectionMap::new(geometry, values.len())?;
    Ok(MaskImage {
        grid: map.paint(values),
        pitch_um: geometry.pitch_um,
        aperture_fraction: geometry.aperture_fraction,
    })
}

/// Binary star chart with `n_sections` equal wedges alternating 1, 0, 1, 0, ...
pub fn gen_star_chart(n_sections: usize, geometry: MaskGeometry) -> Result<MaskImage> {
    if n_sections < 2 || !n_sections.is_multiple_of(2) {
        return Err(invalid("n_sections", format!("{n_sections} must be even and at least 2")));
    }
    let values: Vec<f64> = (0..n_sections).map(|k| if k % 2 == 0 { 1.0 } else { 0.0 }).collect();
    realize_sections(&values, geometry)
}

/// FZA zone scale giving `zones` full transparent/opaque periods inside the aperture.
pub fn fza_beta_for_zones(geometry: &MaskGeometry, zones: f64) -> f64 {
    let r = geometry.aperture_radius_px() * geometry.pitch_um;
    r / (2.0 * zones).sqrt()
}

/// Binary Fresnel zone aperture: open where `cos(pi r^2 / beta^2) >= 0`.
pub fn gen_fza(beta_um: f64, geometry: MaskGeometry) -> Result<MaskImage> {
    geometry.validate()?;
    if !(beta_um > 0.0 && beta_um.is_finite()) {
        return Err(invalid("beta_um", format!("{beta_um} must be positive")));
    }
    let grid = Array2::from_shape_fn((geometry.ny, geometry.nx), |(r, c)| {
        if !geometry.in_aperture(r, c) {
            return 0.0;
        }
        let (dx, dy) = geometry.offset(r, c);
        let rho2 = (dx * dx + dy * dy) * geometry.pitch_um * geometry.pitch_um;
        if (PI * rho2 / (beta_um * beta_um)).cos() >= 0.0 {
            1.0
        } else {
            0.0
        }
    });
    Ok(MaskImage {
        grid,
        pitch_um: geometry.pitch_um,
        aperture_fraction: geometry.aperture_fraction,
    })
}

/// I.i.d. Bernoulli(`density`) binary pixels inside the aperture.
pub fn gen_random(density: f64, seed: u64, geometry: MaskGeometry) -> Result<MaskImage> {
    geometry.validate()?;
    if !(0.0..=1.0).contains(&density) {
        return Err(invalid("density", format!("{density} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // one draw per pixel in row-major order, shielded or not
    let grid = Array2::from_shape_fn((geometry.ny, geometry.nx), |(r, c)| {
        let open = rng.gen::<f64>() < density;
        if open && geometry.in_aperture(r, c) {
            1.0
        } else {
            0.0
        }
    });
    Ok(MaskImage {
        grid,
        pitch_um: geometry.pitch_um,
        aperture_fraction: geometry.aperture_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(n: usize) -> MaskGeometry {
        MaskGeometry::new(n, n, 1.0, 1.0).unwrap()
    }

    #[test]
    fn transmittance_examples() {
        let p = RadialMaskParams::new(vec![0.0, 20.0, 3f64.ln()]).unwrap();
        let t = p.transmittance();
        assert_eq!(t[0], 0.5);
        assert!((t[1] - 1.0).abs() < 1e-8);
        // independent evaluation: 1 / (1 + 1/3)
        assert!((t[2] - 0.75).abs() < 1e-15);
        assert!((t[2] - 1.0 / (1.0 + (-(3f64.ln())).exp())).abs() < 1e-15);
    }

    #[test]
    fn params_reject_bad_input() {
        assert!(RadialMaskParams::new(vec![]).is_err());
        assert!(RadialMaskParams::new(vec![0.0, f64::NAN]).is_err());
        assert!(RadialMaskParams::from_json(r#"{"n_sections": 3, "raw_values": [1.0, 2.0]}"#).is_err());
        let p = RadialMaskParams::from_json(r#"{"n_sections": 2, "raw_values": [1.0, -2.0]}"#).unwrap();
        assert_eq!(p.raw_values(), &[1.0, -2.0]);
        let back = RadialMaskParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn degenerate_grid_rejected() {
        let p = RadialMaskParams::uniform(4, 0.0).unwrap();
        let g = MaskGeometry {
            ny: 1,
            nx: 8,
            pitch_um: 1.0,
            aperture_fraction: 1.0,
        };
        assert!(matches!(realize_radial(&p, g), Err(Error::DegenerateGrid { .. })));
        assert!(MaskGeometry::new(8, 8, 1.0, 0.0).is_err());
        assert!(MaskGeometry::new(8, 8, 1.0, 1.5).is_err());
    }

    #[test]
    fn two_sections_split_half_planes() {
        let p = RadialMaskParams::new(vec![20.0, -20.0]).unwrap();
        let m = realize_radial(&p, geom(4)).unwrap();
        for c in 0..4 {
            // rows 0 and 1 are above the center
            for r in 0..2 {
                if geom(4).in_aperture(r, c) {
                    assert!(m.grid[[r, c]] > 0.999);
                }
            }
            for r in 2..4 {
                assert!(m.grid[[r, c]] < 1e-3);
            }
        }
    }

    #[test]
    fn uniform_params_give_constant_disk() {
        let p = RadialMaskParams::uniform(70, 0.3).unwrap();
        let g = MaskGeometry::new(40, 40, 1.0, 0.8).unwrap();
        let m = realize_radial(&p, g).unwrap();
        let t = sigmoid(0.3);
        for ((r, c), v) in m.grid.indexed_iter() {
            let expect = if g.in_aperture(r, c) { t } else { 0.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn section_binning_matches_per_pixel_oracle() {
        let p = RadialMaskParams::new(vec![20.0, -20.0, 20.0, -20.0]).unwrap();
        let g = geom(64);
        let map = SectionMap::new(g, 4).unwrap();
        let m = realize_radial(&p, g).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                if !g.in_aperture(r, c) {
                    assert_eq!(m.grid[[r, c]], 0.0);
                    continue;
                }
                // quadrant from coordinate signs, no trigonometry
                let x = c as f64 - 31.5;
                let y = 31.5 - r as f64;
                let quadrant = match (x > 0.0, y > 0.0) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (false, false) => 2,
                    (true, false) => 3,
                };
                assert_eq!(map.sections()[[r, c]], Some(quadrant));
                let expect = if quadrant % 2 == 0 { sigmoid(20.0) } else { sigmoid(-20.0) };
                assert_eq!(m.grid[[r, c]], expect);
            }
        }
    }

    #[test]
    fn center_pixel_is_section_zero() {
        let g = geom(5);
        let map = SectionMap::new(g, 7).unwrap();
        assert_eq!(map.sections()[[2, 2]], Some(0));
    }

    #[test]
    fn star_chart_examples() {
        assert!(gen_star_chart(3, geom(8)).is_err());
        assert!(gen_star_chart(0, geom(8)).is_err());

        let half = gen_star_chart(2, geom(8)).unwrap();
        assert_eq!(half.grid[[1, 4]], 1.0);
        assert_eq!(half.grid[[6, 4]], 0.0);

        let g = MaskGeometry::new(140, 140, 1.0, DEFAULT_APERTURE_FRACTION).unwrap();
        let m = gen_star_chart(20, g).unwrap();
        assert!((m.mean_in_aperture() - 0.5).abs() <= 0.02);

        let star = gen_star_chart(4, geom(32)).unwrap();
        let radial = realize_radial(&RadialMaskParams::new(vec![40.0, -40.0, 40.0, -40.0]).unwrap(), geom(32)).unwrap();
        for (a, b) in star.grid.iter().zip(radial.grid.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fza_examples() {
        assert!(gen_fza(0.0, geom(8)).is_err());
        assert!(gen_fza(-1.0, geom(8)).is_err());
        // odd grid so a pixel sits exactly on the center
        let g = MaskGeometry::new(41, 41, 1.0, 1.0).unwrap();
        let beta = 10.0;
        let m = gen_fza(beta, g).unwrap();
        assert_eq!(m.grid[[20, 20]], 1.0);
        // r = beta at (20, 30)
        assert_eq!(m.grid[[20, 30]], 0.0);
        for ((r, c), v) in m.grid.indexed_iter() {
            if !g.in_aperture(r, c) {
                continue;
            }
            let rho2 = (r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2);
            // open iff rho lies in [beta sqrt(2k - 1/2), beta sqrt(2k + 1/2)] for some k
            let s = rho2 / (beta * beta);
            let k = (s / 2.0).round();
            let open = (s - 2.0 * k).abs() <= 0.5;
            assert_eq!(*v == 1.0, open, "pixel ({r}, {c})");
        }
    }

    #[test]
    fn random_examples() {
        let g = MaskGeometry::new(140, 140, 1.0, DEFAULT_APERTURE_FRACTION).unwrap();
        let zero = gen_random(0.0, 7, g).unwrap();
        assert!(zero.grid.iter().all(|v| *v == 0.0));
        let one = gen_random(1.0, 7, g).unwrap();
        assert_eq!(one.grid, g.aperture().mapv(|a| if a { 1.0 } else { 0.0 }));
        let half = gen_random(0.5, 7, g).unwrap();
        assert!((half.mean_in_aperture() - 0.5).abs() <= 0.03);
        assert_eq!(half, gen_random(0.5, 7, g).unwrap());
        assert_ne!(half, gen_random(0.5, 8, g).unwrap());
        assert!(gen_random(1.5, 0, g).is_err());
    }

    #[test]
    fn gather_is_adjoint_of_paint() {
        let g = geom(16);
        let map = SectionMap::new(g, 5).unwrap();
        let values = [0.3, -1.0, 2.0, 0.5, 4.0];
        let pixels = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 31 + c * 17) % 11) as f64 - 5.0);
        let lhs: f64 = map.paint(&values).iter().zip(pixels.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = map.gather(&pixels).iter().zip(values.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotating_sections_rotates_grid(raw in prop::collection::vec(-5.0f64..5.0, 4), n in 2usize..20) {
            let n = 2 * n;
            let g = MaskGeometry::new(n, n, 1.0, 1.0).unwrap();
            let p = RadialMaskParams::new(raw.clone()).unwrap();
            let mut rotated = raw.clone();
            rotated.rotate_right(1);
            let a = realize_radial(&p, g).unwrap();
            let b = realize_radial(&RadialMaskParams::new(rotated).unwrap(), g).unwrap();
            // b at angle phi equals a at phi - 90 degrees: (dx, dy) -> (dy, -dx)
            for r in 0..n {
                for c in 0..n {
                    let (dx, dy) = g.offset(r, c);
                    let (sx, sy) = (dy, -dx);
                    let sc = (sx + (n as f64 - 1.0) / 2.0).round() as usize;
                    let sr = ((n as f64 - 1.0) / 2.0 - sy).round() as usize;
                    prop_assert_eq!(b.grid[[r, c]], a.grid[[sr, sc]]);
                }
            }
        }

        #[test]
        fn uniform_mask_is_symmetric_under_quarter_turn(v in -5.0f64..5.0, n in 2usize..30, k in 1usize..80) {
            let g = MaskGeometry::new(n, n, 1.0, 0.9).unwrap();
            let m = realize_radial(&RadialMaskParams::uniform(k, v).unwrap(), g).unwrap();
            for ((r, c), val) in m.grid.indexed_iter() {
                prop_assert_eq!(*val, m.grid[[c, n - 1 - r]]);
            }
        }

        #[test]
        fn sections_partition_aperture(ny in 2usize..40, nx in 2usize..40, k in 1usize..90, frac in 0.1f64..=1.0) {
            let g = MaskGeometry::new(ny, nx, 1.0, frac).unwrap();
            let map = SectionMap::new(g, k).unwrap();
            for ((r, c), s) in map.sections().indexed_iter() {
                prop_assert_eq!(s.is_some(), g.in_aperture(r, c));
                if let Some(s) = s {
                    prop_assert!(*s < k);
                }
            }
            let total: usize = map.pixel_counts().iter().sum();
            prop_assert_eq!(total, g.aperture().iter().filter(|a| **a).count());
        }

        #[test]
        fn generated_masks_stay_in_unit_interval(raw in prop::collection::vec(-30.0f64..30.0, 1..40), seed in any::<u64>(), beta in 0.5f64..20.0) {
            let g = MaskGeometry::new(24, 30, 1.0, 0.8).unwrap();
            let ap = g.aperture();
            let radial = realize_radial(&RadialMaskParams::new(raw).unwrap(), g).unwrap();
            prop_assert!(radial.grid.iter().all(|v| (0.0..=1.0).contains(v)));
            for m in [gen_fza(beta, g).unwrap(), gen_random(0.5, seed, g).unwrap(), gen_star_chart(6, g).unwrap()] {
                for (v, a) in m.grid.iter().zip(ap.iter()) {
                    prop_assert!(*v == 0.0 || (*v == 1.0 && *a));
                }
            }
        }
    }
}
