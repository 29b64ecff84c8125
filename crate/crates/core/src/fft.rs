//! Two-dimensional complex FFTs over `ndarray` grids.
//!
//! Transforms are unnormalized in both directions; callers divide by the
//! number of samples after an inverse transform when they need `ifft(fft(x)) == x`.

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Cached row/column plans for one grid shape.
pub struct Fft2 {
    ny: usize,
    nx: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            ny,
            nx,
            row_fwd: planner.plan_fft(nx, FftDirection::Forward),
            row_inv: planner.plan_fft(nx, FftDirection::Inverse),
            col_fwd: planner.plan_fft(ny, FftDirection::Forward),
            col_inv: planner.plan_fft(ny, FftDirection::Inverse),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn len(&self) -> usize {
        self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.process(data, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalized inverse transform.
    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.process(data, &self.row_inv, &self.col_inv);
    }

    pub fn forward_real(&self, data: &Array2<f64>) -> Array2<Complex64> {
        let mut out = data.mapv(|v| Complex64::new(v, 0.0));
        self.forward(&mut out);
        out
    }

    /// Normalized inverse transform keeping only the real part.
    pub fn inverse_real(&self, spectrum: &Array2<Complex64>) -> Array2<f64> {
        let mut buf = spectrum.clone();
        self.inverse(&mut buf);
        let scale = 1.0 / self.len() as f64;
        buf.mapv(|c| c.re * scale)
    }

    fn process(&self, data: &mut Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.ny, self.nx), "grid shape does not match plan");
        let mut scratch = vec![Complex64::default(); row.get_inplace_scratch_len().max(col.get_inplace_scratch_len())];
        for mut lane in data.lanes_mut(Axis(1)) {
            match lane.as_slice_mut() {
                Some(s) => row.process_with_scratch(s, &mut scratch),
                None => {
                    let mut tmp = lane.to_vec();
                    row.process_with_scratch(&mut tmp, &mut scratch);
                    lane.iter_mut().zip(tmp).for_each(|(d, s)| *d = s);
                }
            }
        }
        let mut column = vec![Complex64::default(); self.ny];
        for mut lane in data.lanes_mut(Axis(0)) {
            column.iter_mut().zip(lane.iter()).for_each(|(d, s)| *d = *s);
            col.process_with_scratch(&mut column, &mut scratch);
            lane.iter_mut().zip(column.iter()).for_each(|(d, s)| *d = *s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_input() {
        let plan = Fft2::new(6, 5);
        let data = Array2::from_shape_fn((6, 5), |(i, j)| (i * 7 + j * 3) as f64 % 4.0 - 1.5);
        let back = plan.inverse_real(&plan.forward_real(&data));
        for (a, b) in data.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_is_sum() {
        let plan = Fft2::new(3, 4);
        let data = Array2::from_shape_fn((3, 4), |(i, j)| (i + 2 * j) as f64);
        let spec = plan.forward_real(&data);
        assert!((spec[[0, 0]].re - data.sum()).abs() < 1e-12);
    }
}
