//! Dense 3D real and complex fields.
//!
//! All volumes are stored in C order with `z` fastest: the linear index of
//! voxel `(x, y, z)` is `(x * ny + y) * nz + z`. Storage is 32-bit; transforms
//! and reductions accumulate in 64-bit.

mod blur;
pub mod cdiv;
mod dct;
mod fft;

use std::fmt;

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blur::{gaussian_blur, gaussian_blur_f64, gaussian_kernel};
pub use dct::{dct_resample, resample_matrix};
pub use fft::{fft3_centered, ifft3_centered, Fft3};

/// Grid extent along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// True when every axis is even and at least 2.
    pub fn is_even(&self) -> bool {
        self.as_array().iter().all(|&n| n >= 2 && n % 2 == 0)
    }

    pub(crate) fn require_even(&self, op: &'static str) -> Result<()> {
        if self.is_even() {
            Ok(())
        } else {
            Err(Error::OddDims { op, dims: *self })
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.ny + y) * self.nz + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.nz;
        let y = (idx / self.nz) % self.ny;
        let x = idx / (self.ny * self.nz);
        [x, y, z]
    }

    /// Index of the voxel reflected through the origin, `(-x mod nx, ...)`.
    /// For even dims this is also the reflection through the center voxel.
    #[inline]
    pub fn reflect_index(&self, idx: usize) -> usize {
        let [x, y, z] = self.coords(idx);
        self.index(
            (self.nx - x) % self.nx,
            (self.ny - y) % self.ny,
            (self.nz - z) % self.nz,
        )
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.nx, self.ny, self.nz)
    }
}

/// Grid geometry: extent plus the physical size of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: Dims,
    /// Lattice units per voxel.
    pub voxel_pitch: f64,
}

impl GridSpec {
    pub fn new(dims: Dims, voxel_pitch: f64) -> Result<Self> {
        dims.require_even("GridSpec")?;
        if !(voxel_pitch > 0.0 && voxel_pitch.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "GridSpec",
                msg: format!("voxel_pitch must be positive, got {voxel_pitch}"),
            });
        }
        Ok(Self { dims, voxel_pitch })
    }

    /// Physical extent of the box along each axis.
    pub fn extent(&self) -> [f64; 3] {
        self.dims.as_array().map(|n| n as f64 * self.voxel_pitch)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dims: Dims::cube(32),
            voxel_pitch: 2.0,
        }
    }
}

/// A dense 3D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
}

pub type RealVolume = Volume<f32>;
pub type ComplexVolume = Volume<Complex32>;

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![T::default(); dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }
}

impl<T> Volume<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::BadLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for x in 0..dims.nx {
            for y in 0..dims.ny {
                for z in 0..dims.nz {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.dims.index(x, y, z)]
    }

    pub fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut T {
        let i = self.dims.index(x, y, z);
        &mut self.data[i]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn require_same_dims<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }
}

impl RealVolume {
    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl ComplexVolume {
    pub fn to_c64(&self) -> Vec<Complex64> {
        self.data
            .iter()
            .map(|c| Complex64::new(c.re as f64, c.im as f64))
            .collect()
    }

    pub fn from_c64(dims: Dims, data: &[Complex64]) -> Result<Self> {
        Self::new(
            dims,
            data.iter()
                .map(|c| Complex32::new(c.re as f32, c.im as f32))
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Per-voxel argument in `(-pi, pi]`.
    pub fn phase(&self) -> RealVolume {
        self.map(|c| (c.im as f64).atan2(c.re as f64) as f32)
    }
}

/// Combines an amplitude and a phase into `shape * e^{i phase}`.
pub fn recombine(shape: &RealVolume, phase: &RealVolume) -> Result<ComplexVolume> {
    shape.require_same_dims(phase)?;
    let data = shape
        .data
        .iter()
        .zip(&phase.data)
        .map(|(&s, &p)| {
            let (sin, cos) = (p as f64).sin_cos();
            Complex32::new((s as f64 * cos) as f32, (s as f64 * sin) as f32)
        })
        .collect();
    Ok(Volume {
        dims: shape.dims,
        data,
    })
}

/// Per-voxel modulus.
pub fn magnitude(f: &ComplexVolume) -> RealVolume {
    f.map(|c| (c.re as f64).hypot(c.im as f64) as f32)
}

/// Cyclic shift by `n/2` along every axis. For even dims `forward` and its
/// inverse coincide; for odd dims the inverse shifts by `-(n/2)`.
pub fn center_shift<T: Copy>(vol: &Volume<T>, forward: bool) -> Volume<T> {
    let half = vol.dims.as_array().map(|n| (n / 2) as isize);
    let shift = if forward { half } else { half.map(|h| -h) };
    cyclic_shift(vol, shift)
}

/// `out[v] = vol[v - shift]` with periodic wrap.
pub fn cyclic_shift<T: Copy>(vol: &Volume<T>, shift: [isize; 3]) -> Volume<T> {
    let d = vol.dims;
    let n = d.as_array();
    let s: Vec<usize> = (0..3)
        .map(|a| shift[a].rem_euclid(n[a] as isize) as usize)
        .collect();
    let mut out = Vec::with_capacity(d.len());
    for x in 0..d.nx {
        let sx = (x + n[0] - s[0]) % n[0];
        for y in 0..d.ny {
            let sy = (y + n[1] - s[1]) % n[1];
            let row = d.index(sx, sy, 0);
            for z in 0..d.nz {
                let sz = (z + n[2] - s[2]) % n[2];
                out.push(vol.data[row + sz]);
            }
        }
    }
    Volume { dims: d, data: out }
}

/// In-place `n/2` shift of a C-ordered slice with even dims. Self-inverse.
pub(crate) fn center_shift_in_place<T>(data: &mut [T], dims: Dims) {
    debug_assert!(dims.is_even());
    let (hx, hy, hz) = (dims.nx / 2, dims.ny / 2, dims.nz / 2);
    for x in 0..hx {
        for y in 0..dims.ny {
            let py = (y + hy) % dims.ny;
            for z in 0..dims.nz {
                let pz = (z + hz) % dims.nz;
                data.swap(dims.index(x, y, z), dims.index(x + hx, py, pz));
            }
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
#[inline]
pub fn wrap_phase(p: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (p + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::FRAC_PI_2;

    #[test]
    fn recombine_identity_and_annihilator() {
        let d = Dims::cube(4);
        let one = RealVolume::filled(d, 1.0);
        let zero = RealVolume::zeros(d);
        let phase = RealVolume::from_fn(d, |x, y, z| (x + 2 * y + 3 * z) as f32 * 0.37);
        let c = recombine(&one, &zero).unwrap();
        assert!(c.data().iter().all(|v| *v == Complex32::new(1.0, 0.0)));
        let c = recombine(&zero, &phase).unwrap();
        assert!(c.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn recombine_quarter_turn() {
        let d = Dims::cube(2);
        let mut shape = RealVolume::zeros(d);
        let mut phase = RealVolume::zeros(d);
        *shape.at_mut(1, 0, 1) = 0.5;
        *phase.at_mut(1, 0, 1) = FRAC_PI_2;
        let c = recombine(&shape, &phase).unwrap();
        let v = c.at(1, 0, 1);
        assert!(v.re.abs() < 1e-7 && (v.im - 0.5).abs() < 1e-7);
    }

    #[test]
    fn recombine_rejects_mismatch_and_names_dims() {
        let a = RealVolume::zeros(Dims::cube(4));
        let b = RealVolume::zeros(Dims::new(4, 4, 2));
        let err = recombine(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(4, 4, 4)") && err.contains("(4, 4, 2)"), "{err}");
    }

    #[test]
    fn magnitude_pythagorean() {
        let v = ComplexVolume::new(
            Dims::new(2, 1, 1),
            vec![Complex32::new(3.0, 4.0), Complex32::new(0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(magnitude(&v).data(), &[5.0, 0.0]);
    }

    #[test]
    fn center_shift_moves_origin_to_center_and_is_involution() {
        let d = Dims::new(4, 6, 8);
        let mut imp = RealVolume::zeros(d);
        *imp.at_mut(0, 0, 0) = 1.0;
        let s = center_shift(&imp, true);
        assert_eq!(*s.at(2, 3, 4), 1.0);
        assert_eq!(s.sum(), 1.0);
        let r = RealVolume::from_fn(d, |x, y, z| (x * 100 + y * 10 + z) as f32);
        assert_eq!(center_shift(&center_shift(&r, true), true), r);
        assert_eq!(center_shift(&center_shift(&r, true), false), r);
        let mut inplace = r.data().to_vec();
        center_shift_in_place(&mut inplace, d);
        assert_eq!(inplace, center_shift(&r, true).into_data());
    }

    #[test]
    fn cyclic_shift_roundtrip() {
        let d = Dims::new(4, 2, 6);
        let r = RealVolume::from_fn(d, |x, y, z| (x * 100 + y * 10 + z) as f32);
        let s = cyclic_shift(&r, [3, -1, 7]);
        assert_eq!(*s.at(3, 1, 1), *r.at(0, 0, 0));
        assert_eq!(cyclic_shift(&s, [-3, 1, -7]), r);
    }

    #[test]
    fn reflections() {
        let d = Dims::new(4, 6, 8);
        assert_eq!(d.reflect_index(d.index(1, 0, 3)), d.index(3, 0, 5));
        // about the center voxel (2, 3, 4)
        assert_eq!(d.reflect_index(d.index(2, 3, 4)), d.index(2, 3, 4));
        assert_eq!(d.reflect_index(d.index(3, 3, 4)), d.index(1, 3, 4));
    }

    #[test]
    fn wrap_phase_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_phase(PI), -PI);
        assert!((wrap_phase(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(wrap_phase(0.0), 0.0);
        assert!(wrap_phase(-1e-18) < PI);
        assert!((wrap_phase(2.0 * PI)).abs() < 1e-15);
    }
}
