use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{center_shift_in_place, ComplexVolume, Dims};
use crate::error::Result;

/// Planned 3D FFT for one grid size. Operates in place on C-ordered
/// `Complex64` buffers; the forward transform is unnormalized and the inverse
/// carries the `1/N` factor.
pub struct Fft3 {
    dims: Dims,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
}

impl Fft3 {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let n = dims.as_array();
        let forward = n.map(|k| planner.plan_fft_forward(k));
        let inverse = n.map(|k| planner.plan_fft_inverse(k));
        let scratch_len = forward
            .iter()
            .chain(&inverse)
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            dims,
            forward,
            inverse,
            scratch: vec![Complex64::default(); scratch_len],
            lines: vec![Complex64::default(); dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.dims.len());
        for axis in 0..3 {
            let plan = self.forward[axis].clone();
            self.transform_axis(data, axis, plan.as_ref());
        }
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.dims.len());
        for axis in 0..3 {
            let plan = self.inverse[axis].clone();
            self.transform_axis(data, axis, plan.as_ref());
        }
        let scale = 1.0 / self.dims.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    /// Zero frequency lands at `(nx/2, ny/2, nz/2)`. Requires even dims.
    pub fn forward_centered(&mut self, data: &mut [Complex64]) {
        center_shift_in_place(data, self.dims);
        self.forward(data);
        center_shift_in_place(data, self.dims);
    }

    pub fn inverse_centered(&mut self, data: &mut [Complex64]) {
        center_shift_in_place(data, self.dims);
        self.inverse(data);
        center_shift_in_place(data, self.dims);
    }

    fn transform_axis(&mut self, data: &mut [Complex64], axis: usize, plan: &dyn Fft<f64>) {
        let n = self.dims.as_array();
        let len = n[axis];
        if len <= 1 {
            return;
        }
        if axis == 2 {
            plan.process_with_scratch(data, &mut self.scratch);
            return;
        }
        let stride: usize = n[axis + 1..].iter().product();
        let outer: usize = n[..axis].iter().product();
        let block = len * stride;
        for o in 0..outer {
            let base = o * block;
            let src = &data[base..base + block];
            let lines = &mut self.lines[..block];
            // gather: line `s` holds elements base + k*stride + s
            for k in 0..len {
                let row = &src[k * stride..(k + 1) * stride];
                for (s, &v) in row.iter().enumerate() {
                    lines[s * len + k] = v;
                }
            }
            plan.process_with_scratch(lines, &mut self.scratch);
            let dst = &mut data[base..base + block];
            for k in 0..len {
                let row = &mut dst[k * stride..(k + 1) * stride];
                for (s, v) in row.iter_mut().enumerate() {
                    *v = lines[s * len + k];
                }
            }
        }
    }
}

/// Centered forward DFT: `shift . DFT . ishift`, unnormalized.
pub fn fft3_centered(obj: &ComplexVolume) -> Result<ComplexVolume> {
    let dims = obj.dims();
    dims.require_even("fft3_centered")?;
    let mut buf = obj.to_c64();
    Fft3::new(dims).forward_centered(&mut buf);
    ComplexVolume::from_c64(dims, &buf)
}

/// Exact inverse of [`fft3_centered`], including the `1/N` factor.
pub fn ifft3_centered(f: &ComplexVolume) -> Result<ComplexVolume> {
    let dims = f.dims();
    dims.require_even("ifft3_centered")?;
    let mut buf = f.to_c64();
    Fft3::new(dims).inverse_centered(&mut buf);
    ComplexVolume::from_c64(dims, &buf)
}
