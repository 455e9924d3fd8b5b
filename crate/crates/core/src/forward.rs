//! The Bragg-CDI forward model: complex object to centered diffraction
//! magnitude. This is the one physics kernel shared by the training loss,
//! refinement and phase retrieval.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{recombine, Dims, Fft3, RealVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    /// Divide the magnitude by its maximum.
    pub normalize: bool,
    /// Guard for divisions by `|F|`.
    pub epsilon: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            epsilon: 1e-12,
        }
    }
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument {
                op: "ForwardConfig",
                msg: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// `m = |fft3_centered(shape * e^{i phase})|`, max-normalized when
/// `cfg.normalize`.
pub fn simulate_diffraction(
    shape: &RealVolume,
    phase: &RealVolume,
    cfg: &ForwardConfig,
) -> Result<RealVolume> {
    cfg.validate()?;
    let dims = shape.dims();
    dims.require_even("simulate_diffraction")?;
    if shape.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroShape);
    }
    let obj = recombine(shape, phase)?.to_c64();
    let mut fft = Fft3::new(dims);
    let mag = diffraction_magnitude(&obj, &mut fft, cfg.normalize);
    RealVolume::new(dims, mag.into_iter().map(|v| v as f32).collect())
}

/// Forward model on a raw `Complex64` buffer. Returns `|F|`, divided by its
/// maximum when `normalize` is set and the maximum is positive.
pub fn diffraction_magnitude(obj: &[Complex64], fft: &mut Fft3, normalize: bool) -> Vec<f64> {
    let mut f = obj.to_vec();
    fft.forward_centered(&mut f);
    let mut mag: Vec<f64> = f.iter().map(|c| c.norm()).collect();
    if normalize {
        let max = mag.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            mag.iter_mut().for_each(|v| *v /= max);
        }
    }
    mag
}

/// Per-axis grid extent divided by the extent of `{shape >= 0.1}`.
pub fn oversampling_ratio(shape: &RealVolume) -> Result<[f64; 3]> {
    let dims = shape.dims();
    let (lo, hi) = support_bounds(shape, 0.1).ok_or(Error::EmptySupport {
        op: "oversampling_ratio",
    })?;
    let n = dims.as_array();
    Ok([0, 1, 2].map(|a| n[a] as f64 / (hi[a] - lo[a] + 1) as f64))
}

/// Inclusive index bounding box of `{vol >= threshold}`.
pub(crate) fn support_bounds(vol: &RealVolume, threshold: f32) -> Option<([usize; 3], [usize; 3])> {
    let dims: Dims = vol.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in vol.data().iter().enumerate() {
        if v >= threshold {
            any = true;
            let c = dims.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    any.then_some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::cyclic_shift;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(d: Dims, seed: u64) -> (RealVolume, RealVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = RealVolume::from_fn(d, |x, y, z| {
            let inside = (2..6).contains(&x) && (1..5).contains(&y) && (3..7).contains(&z);
            if inside {
                rng.random_range(0.2..1.0)
            } else {
                0.0
            }
        });
        let phase = RealVolume::from_fn(d, |x, y, z| ((x + 2 * y + 3 * z) as f32 * 0.3).sin());
        (shape, phase)
    }

    #[test]
    fn center_impulse_flat_after_normalization() {
        let d = Dims::cube(8);
        let mut shape = RealVolume::zeros(d);
        *shape.at_mut(4, 4, 4) = 1.0;
        let m = simulate_diffraction(&shape, &RealVolume::zeros(d), &ForwardConfig::default()).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn global_phase_and_translation_invariance() {
        let d = Dims::cube(8);
        let (shape, phase) = blob(d, 1);
        let cfg = ForwardConfig::default();
        let m = simulate_diffraction(&shape, &phase, &cfg).unwrap();
        let offset = phase.map(|&p| p + 1.234);
        let m2 = simulate_diffraction(&shape, &offset, &cfg).unwrap();
        let m3 = simulate_diffraction(
            &cyclic_shift(&shape, [1, 0, 0]),
            &cyclic_shift(&phase, [1, 0, 0]),
            &cfg,
        )
        .unwrap();
        for ((a, b), c) in m.data().iter().zip(m2.data()).zip(m3.data()) {
            assert!((a - b).abs() < 1e-5);
            assert!((a - c).abs() < 1e-5);
        }
    }

    #[test]
    fn twin_invariance_and_friedel_symmetry() {
        let d = Dims::cube(8);
        let (shape, phase) = blob(d, 2);
        let cfg = ForwardConfig::default();
        let m = simulate_diffraction(&shape, &phase, &cfg).unwrap();
        let reflect = |v: &RealVolume, sign: f32| {
            RealVolume::from_fn(d, |x, y, z| sign * v.data()[d.reflect_index(d.index(x, y, z))])
        };
        let mt = simulate_diffraction(&reflect(&shape, 1.0), &reflect(&phase, -1.0), &cfg).unwrap();
        for (a, b) in m.data().iter().zip(mt.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let real = simulate_diffraction(&shape, &RealVolume::zeros(d), &cfg).unwrap();
        for i in 0..d.len() {
            assert!((real.data()[i] - real.data()[d.reflect_index(i)]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_shape_is_an_error() {
        let d = Dims::cube(4);
        let r = simulate_diffraction(&RealVolume::zeros(d), &RealVolume::zeros(d), &ForwardConfig::default());
        assert!(matches!(r, Err(Error::ZeroShape)));
    }

    #[test]
    fn oversampling_cases() {
        let d = Dims::cube(16);
        let half = RealVolume::from_fn(d, |x, y, z| {
            let c = |i: usize| (4..12).contains(&i);
            if c(x) && c(y) && c(z) { 1.0 } else { 0.0 }
        });
        assert_eq!(oversampling_ratio(&half).unwrap(), [2.0; 3]);
        assert_eq!(oversampling_ratio(&RealVolume::filled(d, 1.0)).unwrap(), [1.0; 3]);
        assert!(oversampling_ratio(&RealVolume::filled(d, 0.05)).is_err());
    }
}
