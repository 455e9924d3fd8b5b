//! Reconstruction error metrics that absorb the ambiguities of a diffraction
//! magnitude: conjugate twin, global phase and cyclic translation.

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod benchmark;

pub use benchmark::{benchmark, BenchmarkConfig, BenchmarkReport, BenchmarkRow, Method, MethodSummary, Quartiles};
use crate::forward::diffraction_magnitude;
use crate::volume::{cyclic_shift, magnitude, recombine, wrap_phase, ComplexVolume, Dims, Fft3, RealVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    pub shape_mae: f64,
    pub phase_mae: f64,
    pub chi2: f64,
    pub twin_used: bool,
    pub shift_used: [isize; 3],
}

impl ReconError {
    /// Selection score `shape_mae + phase_weight * phase_mae`.
    pub fn score(&self, phase_weight: f64) -> f64 {
        self.shape_mae + phase_weight * self.phase_mae
    }
}

/// Weight of the phase error in the twin/shift selection score.
pub const DEFAULT_PHASE_WEIGHT: f64 = 1.0 / std::f64::consts::PI;

/// `out[i] = v[(-i) mod n]` per axis.
pub fn reflect<T: Copy>(v: &Volume<T>) -> Volume<T> {
    let d = v.dims();
    let n = d.as_array();
    Volume::from_fn(d, |x, y, z| *v.at((n[0] - x) % n[0], (n[1] - y) % n[1], (n[2] - z) % n[2]))
}

/// `conj(rho[-r mod n])`.
pub fn conjugate_twin(rho: &ComplexVolume) -> Result<ComplexVolume> {
    rho.dims().require_even("conjugate_twin")?;
    Ok(reflect(rho).map(|c| c.conj()))
}

/// Twin of a (shape, phase) pair.
pub fn twin_pair(shape: &RealVolume, phase: &RealVolume) -> (RealVolume, RealVolume) {
    (reflect(shape), reflect(phase).map(|p| -p))
}

fn to_signed(s: usize, n: usize) -> isize {
    if s >= n / 2 && s > 0 {
        s as isize - n as isize
    } else {
        s as isize
    }
}

/// Integer cyclic shift `s` maximizing `sum_v target(v) pred(v - s)`, so that
/// `cyclic_shift(pred, s)` lines up with `target`. Components are reported in
/// `[-n/2, n/2)`; near-ties go to the lexicographically smallest shift.
pub fn best_shift(pred: &RealVolume, target: &RealVolume) -> Result<[isize; 3]> {
    pred.require_same_dims(target)?;
    let d = pred.dims();
    let mut fft = Fft3::new(d);
    let mut p: Vec<Complex64> = pred.data().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    let mut t: Vec<Complex64> = target.data().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    fft.forward(&mut p);
    fft.forward(&mut t);
    for (a, b) in t.iter_mut().zip(&p) {
        *a *= b.conj();
    }
    fft.inverse(&mut t);
    let corr: Vec<f64> = t.iter().map(|c| c.re).collect();
    Ok(pick_shift(&corr, d))
}

fn pick_shift(corr: &[f64], d: Dims) -> [isize; 3] {
    let max = corr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = corr.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(f64::MIN_POSITIVE);
    let n = d.as_array();
    let mut best: Option<[isize; 3]> = None;
    for (i, &c) in corr.iter().enumerate() {
        if c >= max - 1e-9 * scale {
            let k = d.coords(i);
            let s = [0, 1, 2].map(|a| to_signed(k[a], n[a]));
            if best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        }
    }
    best.expect("non-empty correlation")
}

/// Aligns `|pred|` to `|target|`; returns the shifted prediction and the shift.
pub fn register(pred: &ComplexVolume, target: &ComplexVolume) -> Result<(ComplexVolume, [isize; 3])> {
    let s = best_shift(&magnitude(pred), &magnitude(target))?;
    Ok((cyclic_shift(pred, s), s))
}

/// `wrap(phi - arg(sum w e^{i phi}))`.
pub fn gauge_fix(phase: &RealVolume, weights: &RealVolume) -> Result<RealVolume> {
    phase.require_same_dims(weights)?;
    let offset = circular_mean(phase, weights)?;
    Ok(phase.map(|&p| wrap_phase(p as f64 - offset) as f32))
}

fn circular_mean(phase: &RealVolume, weights: &RealVolume) -> Result<f64> {
    if weights.data().iter().any(|&w| w < 0.0) || weights.data().iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidArgument {
            op: "gauge_fix",
            msg: "weights must be non-negative and not all zero".into(),
        });
    }
    let acc: Complex64 = phase
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&p, &w)| Complex64::from_polar(w as f64, p as f64))
        .sum();
    Ok(acc.arg())
}

/// Weighted mean of `|wrap(a - b)|`, both gauge-fixed with `w`.
fn phase_mae(a: &RealVolume, b: &RealVolume, w: &RealVolume) -> Result<f64> {
    let oa = circular_mean(a, w)?;
    let ob = circular_mean(b, w)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&pa, &pb), &wv) in a.data().iter().zip(b.data()).zip(w.data()) {
        let da = wrap_phase(pa as f64 - oa);
        let db = wrap_phase(pb as f64 - ob);
        num += wv as f64 * wrap_phase(da - db).abs();
        den += wv as f64;
    }
    Ok(num / den)
}

fn normalized_magnitude(shape: &RealVolume, phase: &RealVolume, fft: &mut Fft3) -> Result<Vec<f64>> {
    let obj = recombine(shape, phase)?.to_c64();
    Ok(diffraction_magnitude(&obj, fft, true))
}

fn chi2_between(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den > 0.0 { num / den } else { num }
}

/// Error of a predicted (shape, phase) pair against the truth, minimized over
/// the prediction and its conjugate twin after registration and gauge fixing.
pub fn recon_error(
    pred_shape: &RealVolume,
    pred_phase: &RealVolume,
    true_shape: &RealVolume,
    true_phase: &RealVolume,
) -> Result<ReconError> {
    recon_error_weighted(pred_shape, pred_phase, true_shape, true_phase, DEFAULT_PHASE_WEIGHT)
}

pub fn recon_error_weighted(
    pred_shape: &RealVolume,
    pred_phase: &RealVolume,
    true_shape: &RealVolume,
    true_phase: &RealVolume,
    phase_weight: f64,
) -> Result<ReconError> {
    pred_shape.require_same_dims(pred_phase)?;
    pred_shape.require_same_dims(true_shape)?;
    true_shape.require_same_dims(true_phase)?;
    let d = pred_shape.dims();
    d.require_even("recon_error")?;
    let mut fft = Fft3::new(d);
    let m_true = normalized_magnitude(true_shape, true_phase, &mut fft)?;
    let m_pred = if pred_shape.data().iter().any(|&v| v != 0.0) {
        normalized_magnitude(pred_shape, pred_phase, &mut fft)?
    } else {
        vec![0.0; d.len()]
    };
    let chi2 = chi2_between(&m_pred, &m_true);

    let (ts, tp) = twin_pair(pred_shape, pred_phase);
    let mut best: Option<ReconError> = None;
    for (twin_used, shape, phase) in [(false, pred_shape, pred_phase), (true, &ts, &tp)] {
        let shift = best_shift(shape, true_shape)?;
        let s = cyclic_shift(shape, shift);
        let p = cyclic_shift(phase, shift);
        let shape_mae = s
            .data()
            .iter()
            .zip(true_shape.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / d.len() as f64;
        let err = ReconError {
            shape_mae,
            phase_mae: phase_mae(&p, true_phase, true_shape)?,
            chi2,
            twin_used,
            shift_used: shift,
        };
        if best.as_ref().is_none_or(|b| err.score(phase_weight) < b.score(phase_weight)) {
            best = Some(err);
        }
    }
    Ok(best.expect("two candidates"))
}

/// Splits a complex estimate into (shape, phase) with the shape scaled to a
/// maximum of one.
pub fn split_object(rho: &ComplexVolume) -> (RealVolume, RealVolume) {
    let amp = magnitude(rho);
    let max = amp.max();
    let shape = if max > 0.0 { amp.map(|&a| a / max) } else { amp };
    (shape, rho.phase())
}

/// IoU of `{|rho| >= threshold * max|rho|}` with `{true_shape >= threshold}`
/// after registration, maximized over `rho` and its conjugate twin.
pub fn twin_resolved_iou(rho: &ComplexVolume, true_shape: &RealVolume, threshold: f32) -> Result<f64> {
    rho.require_same_dims(true_shape)?;
    let (shape, _) = split_object(rho);
    let truth: Vec<bool> = true_shape.data().iter().map(|&v| v >= threshold).collect();
    let mut best = 0.0f64;
    for cand in [shape.clone(), reflect(&shape)] {
        let s = best_shift(&cand, true_shape)?;
        let aligned = cyclic_shift(&cand, s);
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &t) in aligned.data().iter().zip(&truth) {
            let a = a >= threshold;
            inter += (a && t) as usize;
            union += (a || t) as usize;
        }
        if union > 0 {
            best = best.max(inter as f64 / union as f64);
        }
    }
    Ok(best)
}

/// Multiplies an object by `e^{i theta}`.
pub fn apply_global_phase(rho: &ComplexVolume, theta: f64) -> ComplexVolume {
    let r = Complex32::from_polar(1.0, theta as f32);
    rho.map(|c| c * r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::fft3_centered;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(d: Dims, seed: u64) -> (RealVolume, RealVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = RealVolume::from_fn(d, |x, y, z| {
            if (1..5).contains(&x) && (2..7).contains(&y) && (1..4).contains(&z) {
                rng.random_range(0.2..1.0)
            } else {
                0.0
            }
        });
        let phase = RealVolume::from_fn(d, |_, _, _| rng.random_range(-3.0..3.0));
        (shape, phase)
    }

    #[test]
    fn twin_is_an_involution_with_equal_magnitude() {
        let d = Dims::cube(8);
        let (s, p) = random_pair(d, 1);
        let rho = recombine(&s, &p).unwrap();
        let tw = conjugate_twin(&rho).unwrap();
        assert_eq!(conjugate_twin(&tw).unwrap(), rho);
        let a = magnitude(&fft3_centered(&rho).unwrap());
        let b = magnitude(&fft3_centered(&tw).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        let sym = RealVolume::from_fn(d, |x, y, z| {
            let r = |i: usize| (i as f32 - 4.0).abs();
            (-(r(x) + r(y) + r(z))).exp()
        });
        let real = sym.map(|&v| Complex32::new(v, 0.0));
        assert_eq!(conjugate_twin(&real).unwrap(), real);
    }

    #[test]
    fn register_recovers_constructed_shift() {
        let d = Dims::cube(8);
        let (s, p) = random_pair(d, 2);
        let target = recombine(&s, &p).unwrap();
        let pred = cyclic_shift(&target, [3, 0, 0]);
        let (aligned, shift) = register(&pred, &target).unwrap();
        assert_eq!(shift, [-3, 0, 0]);
        assert_eq!(aligned, target);
        assert_eq!(register(&target, &target).unwrap().1, [0, 0, 0]);
    }

    fn brute_shift(pred: &RealVolume, target: &RealVolume) -> [isize; 3] {
        let d = pred.dims();
        let n = d.nx as isize;
        let mut corr = vec![0.0; d.len()];
        for sx in 0..n {
            for sy in 0..n {
                for sz in 0..n {
                    let shifted = cyclic_shift(pred, [sx, sy, sz]);
                    corr[d.index(sx as usize, sy as usize, sz as usize)] = shifted
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                }
            }
        }
        pick_shift(&corr, d)
    }

    #[test]
    fn fft_correlation_matches_exhaustive_search() {
        let d = Dims::cube(8);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = RealVolume::from_fn(d, |_, _, _| rng.random_range(0.0..1.0));
            let b = RealVolume::from_fn(d, |_, _, _| rng.random_range(0.0..1.0));
            assert_eq!(best_shift(&a, &b).unwrap(), brute_shift(&a, &b));
        }
    }

    #[test]
    fn gauge_fix_cases() {
        let d = Dims::cube(4);
        let w = RealVolume::from_fn(d, |x, _, _| if x < 2 { 1.0 } else { 0.0 });
        let c = RealVolume::filled(d, 1.3);
        assert!(gauge_fix(&c, &w).unwrap().data().iter().all(|v| v.abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RealVolume::from_fn(d, |_, _, _| rng.random_range(-1.0..1.0));
        let g = gauge_fix(&p, &w).unwrap();
        let gg = gauge_fix(&g, &w).unwrap();
        let shifted = gauge_fix(&p.map(|&v| wrap_phase(v as f64 + 2.0) as f32), &w).unwrap();
        for i in 0..d.len() {
            assert!((g.data()[i] - gg.data()[i]).abs() < 1e-5);
            assert!(wrap_phase((g.data()[i] - shifted.data()[i]) as f64).abs() < 1e-5);
        }
        assert!(gauge_fix(&p, &RealVolume::zeros(d)).is_err());
    }

    #[test]
    fn recon_error_cases() {
        let d = Dims::cube(8);
        let (s, p) = random_pair(d, 4);
        let e = recon_error(&s, &p, &s, &p).unwrap();
        assert_eq!((e.shape_mae, e.twin_used, e.shift_used), (0.0, false, [0, 0, 0]));
        assert!(e.phase_mae < 1e-6 && e.chi2 < 1e-12);

        let (ts, tp) = twin_pair(&s, &p);
        let e = recon_error(&ts, &tp, &s, &p).unwrap();
        assert!(e.twin_used);
        assert!(e.shape_mae < 1e-7 && e.phase_mae < 1e-6, "{e:?}");

        let moved = cyclic_shift(&recombine(&s, &p).unwrap(), [2, 1, 0]);
        let moved = apply_global_phase(&moved, 0.7);
        let (ms, mp) = split_object(&moved);
        let e = recon_error(&ms, &mp, &split_object(&recombine(&s, &p).unwrap()).0, &p).unwrap();
        assert!(e.shape_mae <= 1e-6 && e.phase_mae <= 1e-6, "{e:?}");
    }

    #[test]
    fn phase_error_is_bounded() {
        let d = Dims::cube(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = RealVolume::from_fn(d, |_, _, _| rng.random_range(0.0..1.0));
            let a = RealVolume::from_fn(d, |_, _, _| rng.random_range(-3.0..3.0));
            let b = RealVolume::from_fn(d, |_, _, _| rng.random_range(-3.0..3.0));
            let e = recon_error(&s, &a, &s, &b).unwrap();
            assert!((0.0..=std::f64::consts::PI).contains(&e.phase_mae));
        }
    }

    #[test]
    fn iou_of_truth_is_one() {
        let d = Dims::cube(8);
        let (s, p) = random_pair(d, 6);
        let s = s.map(|&v| if v > 0.0 { 1.0 } else { 0.0 });
        let rho = conjugate_twin(&cyclic_shift(&recombine(&s, &p).unwrap(), [1, 2, 3])).unwrap();
        assert_eq!(twin_resolved_iou(&rho, &s, 0.5).unwrap(), 1.0);
    }
}
