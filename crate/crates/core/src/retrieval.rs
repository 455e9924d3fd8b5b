//! Iterative phase retrieval: error reduction (ER), hybrid input-output
//! (HIO), shrink-wrap support refinement and iterate averaging.

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::crystalgen::mix_seed;
use crate::error::{Error, Result};
use crate::volume::{gaussian_blur_f64, ComplexVolume, Dims, Fft3, RealVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hio,
    Er,
}

/// Starting point of a retrieval run.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    /// Random phases on the measured modulus.
    #[default]
    Random,
    /// Start from a given object; the initial support is `{|rho| > 0}`.
    Provided(ComplexVolume),
}

/// Support used before the first shrink-wrap when starting from random phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSupport {
    /// `{|ifft(m^2)| >= threshold * max}`.
    Autocorrelation { threshold: f64 },
    /// Centered box spanning `fraction` of each axis.
    Box { fraction: f64 },
}

impl Default for InitialSupport {
    fn default() -> Self {
        InitialSupport::Box { fraction: 0.5 }
    }
}

impl InitialSupport {
    fn build(&self, m: &[f64], dims: Dims, fft: &mut Fft3) -> Support {
        let mask = match *self {
            InitialSupport::Autocorrelation { threshold } => {
                let mut auto: Vec<Complex64> = m.iter().map(|&a| Complex64::new(a * a, 0.0)).collect();
                fft.inverse_centered(&mut auto);
                let amp: Vec<f64> = auto.iter().map(|c| c.norm()).collect();
                let max = amp.iter().copied().fold(0.0, f64::max);
                amp.iter().map(|&a| a >= threshold * max).collect()
            }
            InitialSupport::Box { fraction } => {
                let n = dims.as_array();
                let half = n.map(|k| ((k as f64 * fraction / 2.0).round() as usize).clamp(1, k / 2));
                (0..dims.len())
                    .map(|i| {
                        let c = dims.coords(i);
                        (0..3).all(|a| c[a] + half[a] >= n[a] / 2 && c[a] < n[a] / 2 + half[a])
                    })
                    .collect()
            }
        };
        Support { dims, mask }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            InitialSupport::Autocorrelation { threshold } => threshold,
            InitialSupport::Box { fraction } => fraction,
        };
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument {
                op: "InitialSupport",
                msg: format!("parameter must be in (0, 1], got {v}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PRConfig {
    pub total_iters: usize,
    /// Repeated cyclically from iteration 0.
    pub block_pattern: Vec<(Algorithm, usize)>,
    pub beta: f64,
    pub shrinkwrap_sigma: f64,
    pub shrinkwrap_threshold: f64,
    /// Iterations between support updates; 0 disables shrink-wrap.
    pub shrinkwrap_interval: usize,
    pub average_last: usize,
    /// Initial support for random starts.
    pub initial_support: InitialSupport,
    /// Guard in `m F / (|F| + epsilon)`.
    pub epsilon: f64,
    #[serde(skip)]
    pub init: Init,
}

impl Default for PRConfig {
    fn default() -> Self {
        Self {
            total_iters: 620,
            block_pattern: vec![(Algorithm::Hio, 40), (Algorithm::Er, 20)],
            beta: 0.9,
            shrinkwrap_sigma: 1.0,
            shrinkwrap_threshold: 0.1,
            shrinkwrap_interval: 20,
            average_last: 20,
            initial_support: InitialSupport::default(),
            epsilon: 1e-12,
            init: Init::Random,
        }
    }
}

impl PRConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "PRConfig", msg });
        if self.average_last < 1 || self.total_iters < self.average_last {
            return bad(format!(
                "need total_iters ({}) >= average_last ({}) >= 1",
                self.total_iters, self.average_last
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if !(self.shrinkwrap_threshold > 0.0 && self.shrinkwrap_threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.shrinkwrap_threshold));
        }
        if self.shrinkwrap_sigma < 0.0 {
            return bad("shrinkwrap_sigma must be >= 0".into());
        }
        if self.block_pattern.is_empty() || self.block_pattern.iter().any(|b| b.1 == 0) {
            return bad("block_pattern needs at least one non-empty block".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        self.initial_support.validate()
    }

    /// Algorithm used at iteration `k`.
    pub fn algorithm_at(&self, k: usize) -> Algorithm {
        let period: usize = self.block_pattern.iter().map(|b| b.1).sum();
        let mut r = k % period;
        for &(alg, count) in &self.block_pattern {
            if r < count {
                return alg;
            }
            r -= count;
        }
        unreachable!("period covers every residue")
    }
}

/// Binary real-space support.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    dims: Dims,
    mask: Vec<bool>,
}

impl Support {
    pub fn from_mask(dims: Dims, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.len() {
            return Err(Error::BadLength { dims, len: mask.len() });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptySupport { op: "Support" });
        }
        Ok(Self { dims, mask })
    }

    /// Voxels where `vol > threshold`.
    pub fn from_volume(vol: &RealVolume, threshold: f32) -> Result<Self> {
        Self::from_mask(vol.dims(), vol.data().iter().map(|&v| v > threshold).collect())
    }

    pub fn full(dims: Dims) -> Self {
        Self { dims, mask: vec![true; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn to_volume(&self) -> RealVolume {
        RealVolume::new(self.dims, self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask length matches dims")
    }

    /// Intersection over union.
    pub fn iou(&self, other: &Support) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.mask.iter().zip(&other.mask) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Output of [`run_phase_retrieval`].
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Complex mean of the support-projected estimates of the final iterations.
    pub object: ComplexVolume,
    /// `chi^2` of the input iterate at every iteration.
    pub chi2_history: Vec<f64>,
    pub support: Support,
    /// `chi^2` of the averaged object.
    pub final_chi2: f64,
}

impl RetrievalResult {
    pub fn final_chi(&self) -> f64 {
        self.final_chi2.sqrt()
    }
}

/// Reusable buffers for one grid size.
pub(crate) struct Projector {
    fft: Fft3,
    spectrum: Vec<Complex64>,
    epsilon: f64,
}

impl Projector {
    pub(crate) fn new(dims: Dims, epsilon: f64) -> Self {
        Self {
            fft: Fft3::new(dims),
            spectrum: vec![Complex64::default(); dims.len()],
            epsilon,
        }
    }

    /// Writes the modulus projection of `rho` into `out` and returns the
    /// `chi^2` of `rho`.
    pub(crate) fn modulus_project(&mut self, rho: &[Complex64], m: &[f64], out: &mut [Complex64]) -> f64 {
        self.spectrum.copy_from_slice(rho);
        self.fft.forward_centered(&mut self.spectrum);
        let (mut num, mut den) = (0.0, 0.0);
        for (f, &mv) in self.spectrum.iter_mut().zip(m) {
            let a = f.norm();
            num += (a - mv) * (a - mv);
            den += mv * mv;
            *f *= mv / (a + self.epsilon);
        }
        out.copy_from_slice(&self.spectrum);
        self.fft.inverse_centered(out);
        if den > 0.0 { num / den } else { num }
    }

    pub(crate) fn chi2(&mut self, rho: &[Complex64], m: &[f64]) -> f64 {
        self.spectrum.copy_from_slice(rho);
        self.fft.forward_centered(&mut self.spectrum);
        let (mut num, mut den) = (0.0, 0.0);
        for (f, &mv) in self.spectrum.iter().zip(m) {
            let a = f.norm();
            num += (a - mv) * (a - mv);
            den += mv * mv;
        }
        if den > 0.0 { num / den } else { num }
    }
}

fn magnitudes(m: &RealVolume) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// Replaces the Fourier modulus of `rho` by `m`, keeping its phase.
pub fn modulus_project(rho: &ComplexVolume, m: &RealVolume) -> Result<ComplexVolume> {
    rho.require_same_dims(m)?;
    rho.dims().require_even("modulus_project")?;
    let mut p = Projector::new(rho.dims(), PRConfig::default().epsilon);
    let mut out = vec![Complex64::default(); rho.len()];
    p.modulus_project(&rho.to_c64(), &magnitudes(m), &mut out);
    ComplexVolume::from_c64(rho.dims(), &out)
}

/// `chi^2 = sum (|F(rho)| - m)^2 / sum m^2`.
pub fn chi2(rho: &ComplexVolume, m: &RealVolume) -> Result<f64> {
    rho.require_same_dims(m)?;
    rho.dims().require_even("chi2")?;
    let mut p = Projector::new(rho.dims(), PRConfig::default().epsilon);
    Ok(p.chi2(&rho.to_c64(), &magnitudes(m)))
}

/// Error reduction: modulus projection inside the support, zero outside.
pub fn er_step(rho: &ComplexVolume, m: &RealVolume, support: &Support) -> Result<ComplexVolume> {
    let proj = modulus_project(rho, m)?;
    check_support(support, rho.dims())?;
    let data = proj
        .data()
        .iter()
        .zip(support.mask())
        .map(|(&v, &s)| if s { v } else { Complex32::default() })
        .collect();
    ComplexVolume::new(rho.dims(), data)
}

/// Hybrid input-output: projection inside the support, `rho - beta * proj`
/// outside.
pub fn hio_step(rho: &ComplexVolume, m: &RealVolume, support: &Support, beta: f64) -> Result<ComplexVolume> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument {
            op: "hio_step",
            msg: format!("beta must be in [0, 1], got {beta}"),
        });
    }
    let proj = modulus_project(rho, m)?;
    check_support(support, rho.dims())?;
    let data = proj
        .data()
        .iter()
        .zip(rho.data())
        .zip(support.mask())
        .map(|((&p, &r), &s)| {
            if s {
                p
            } else {
                let v = Complex64::new(r.re as f64, r.im as f64)
                    - beta * Complex64::new(p.re as f64, p.im as f64);
                Complex32::new(v.re as f32, v.im as f32)
            }
        })
        .collect();
    ComplexVolume::new(rho.dims(), data)
}

fn check_support(support: &Support, dims: Dims) -> Result<()> {
    if support.dims() != dims {
        return Err(Error::DimMismatch { left: support.dims(), right: dims });
    }
    Ok(())
}

/// `{blur(|rho|, sigma) >= threshold * max(blur)}`.
pub fn shrinkwrap(rho: &ComplexVolume, sigma: f64, threshold: f64) -> Result<Support> {
    shrinkwrap_c64(&rho.to_c64(), rho.dims(), sigma, threshold).ok_or(Error::EmptySupport { op: "shrinkwrap" })
}

pub(crate) fn shrinkwrap_c64(rho: &[Complex64], dims: Dims, sigma: f64, threshold: f64) -> Option<Support> {
    let amp: Vec<f64> = rho.iter().map(|c| c.norm()).collect();
    let blurred = gaussian_blur_f64(&amp, dims, sigma);
    let max = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return None;
    }
    let cut = threshold * max;
    let mask: Vec<bool> = blurred.iter().map(|&b| b >= cut).collect();
    Some(Support { dims, mask })
}

/// Random-phase start `ifft(m e^{i theta})`.
fn random_start(m: &[f64], dims: Dims, initial: &InitialSupport, rng: &mut impl Rng) -> (Vec<Complex64>, Support) {
    let mut fft = Fft3::new(dims);
    let mut rho: Vec<Complex64> = m
        .iter()
        .map(|&a| Complex64::from_polar(a, rng.random_range(0.0..TAU)))
        .collect();
    fft.inverse_centered(&mut rho);
    let support = initial.build(m, dims, &mut fft);
    (rho, support)
}

/// One full retrieval run following `cfg`.
pub fn run_phase_retrieval<R: Rng + ?Sized>(m: &RealVolume, cfg: &PRConfig, rng: &mut R) -> Result<RetrievalResult> {
    cfg.validate()?;
    let dims = m.dims();
    dims.require_even("run_phase_retrieval")?;
    let mag = magnitudes(m);
    let (mut rho, mut support) = match &cfg.init {
        Init::Random => {
            log::debug!("random-phase start, initial support {:?}", cfg.initial_support);
            let mut local = ChaCha8Rng::seed_from_u64(rng.random());
            random_start(&mag, dims, &cfg.initial_support, &mut local)
        }
        Init::Provided(obj) => {
            log::debug!("start from provided object");
            obj.require_same_dims(m)?;
            let rho = obj.to_c64();
            let mask = rho.iter().map(|c| c.norm() > 0.0).collect();
            (rho, Support::from_mask(dims, mask)?)
        }
    };

    let mut proj = Projector::new(dims, cfg.epsilon);
    let mut projected = vec![Complex64::default(); dims.len()];
    let mut average = vec![Complex64::default(); dims.len()];
    let mut history = Vec::with_capacity(cfg.total_iters);
    let avg_start = cfg.total_iters - cfg.average_last;

    for k in 0..cfg.total_iters {
        history.push(proj.modulus_project(&rho, &mag, &mut projected));
        match cfg.algorithm_at(k) {
            Algorithm::Er => {
                for ((r, &p), &s) in rho.iter_mut().zip(&projected).zip(&support.mask) {
                    *r = if s { p } else { Complex64::default() };
                }
            }
            Algorithm::Hio => {
                for ((r, &p), &s) in rho.iter_mut().zip(&projected).zip(&support.mask) {
                    *r = if s { p } else { *r - cfg.beta * p };
                }
            }
        }
        // support-constrained estimate of this iteration
        for (p, &s) in projected.iter_mut().zip(&support.mask) {
            if !s {
                *p = Complex64::default();
            }
        }
        if k >= avg_start {
            for (a, &p) in average.iter_mut().zip(&projected) {
                *a += p;
            }
        }
        if cfg.shrinkwrap_interval > 0 && (k + 1) % cfg.shrinkwrap_interval == 0 && k + 1 < cfg.total_iters {
            support = shrinkwrap_c64(&projected, dims, cfg.shrinkwrap_sigma, cfg.shrinkwrap_threshold)
                .ok_or(Error::SupportCollapsed { iteration: k })?;
        }
        if !rho.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::SupportCollapsed { iteration: k });
        }
    }
    let scale = 1.0 / cfg.average_last as f64;
    average.iter_mut().for_each(|a| *a *= scale);
    let final_chi2 = proj.chi2(&average, &mag);
    Ok(RetrievalResult {
        object: ComplexVolume::from_c64(dims, &average)?,
        chi2_history: history,
        support,
        final_chi2,
    })
}

/// Random restarts per volume when none is given.
pub const DEFAULT_RESTARTS: usize = 3;

/// Independent restarts, each on its own stream derived from `seed`, run in
/// parallel on the current rayon pool. Keeps the lowest final `chi^2`; ties go
/// to the earliest restart.
pub fn run_restarts(m: &RealVolume, cfg: &PRConfig, restarts: usize, seed: u64) -> Result<RetrievalResult> {
    let results: Vec<RetrievalResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ mix_seed(r)));
            run_phase_retrieval(m, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut best: Option<RetrievalResult> = None;
    for res in results {
        if best.as_ref().is_none_or(|b| res.final_chi2 < b.final_chi2) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_diffraction, ForwardConfig};
    use crate::volume::{fft3_centered, magnitude, recombine};

    fn object(d: Dims, seed: u64) -> (ComplexVolume, Support) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d.nx;
        let inside = |x: usize, y: usize, z: usize| {
            let c = |i: usize| (n / 4..3 * n / 4).contains(&i);
            c(x) && c(y) && c(z)
        };
        let shape = RealVolume::from_fn(d, |x, y, z| if inside(x, y, z) { rng.random_range(0.3..1.0) } else { 0.0 });
        let phase = RealVolume::from_fn(d, |x, y, z| ((x * 3 + y + 2 * z) as f32 * 0.2).sin());
        let obj = recombine(&shape, &phase).unwrap();
        let support = Support::from_volume(&shape, 0.0).unwrap();
        (obj, support)
    }

    fn raw_magnitude(obj: &ComplexVolume) -> RealVolume {
        magnitude(&fft3_centered(obj).unwrap())
    }

    fn max_diff(a: &ComplexVolume, b: &ComplexVolume) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f32::max)
    }

    #[test]
    fn modulus_projection_fixed_point_and_scale_removal() {
        let (obj, _) = object(Dims::cube(8), 1);
        let m = raw_magnitude(&obj);
        assert!(max_diff(&modulus_project(&obj, &m).unwrap(), &obj) < 1e-5);
        let doubled = obj.map(|c| c * 2.0);
        assert!(max_diff(&modulus_project(&doubled, &m).unwrap(), &obj) < 1e-5);
    }

    #[test]
    fn modulus_projection_postcondition() {
        let d = Dims::cube(8);
        let (obj, _) = object(d, 2);
        let m = raw_magnitude(&obj);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = ComplexVolume::from_fn(d, |_, _, _| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let got = raw_magnitude(&modulus_project(&rho, &m).unwrap());
        let scale = m.max();
        for (a, b) in got.data().iter().zip(m.data()) {
            assert!((a - b).abs() / scale <= 1e-4);
        }
    }

    #[test]
    fn er_fixed_point_and_hard_support() {
        let d = Dims::cube(8);
        let (obj, support) = object(d, 4);
        let m = raw_magnitude(&obj);
        assert!(max_diff(&er_step(&obj, &m, &support).unwrap(), &obj) < 1e-5);
        let noisy = obj.map(|c| c + Complex32::new(0.1, -0.2));
        let out = er_step(&noisy, &m, &support).unwrap();
        for (v, &s) in out.data().iter().zip(support.mask()) {
            if !s {
                assert_eq!(*v, Complex32::default());
            }
        }
    }

    #[test]
    fn er_never_increases_chi() {
        let d = Dims::cube(8);
        for trial in 0..100u64 {
            let (obj, support) = object(d, 100 + trial);
            let m = raw_magnitude(&obj);
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let rho = ComplexVolume::from_fn(d, |_, _, _| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let next = er_step(&rho, &m, &support).unwrap();
            let (c0, c1) = (chi2(&rho, &m).unwrap(), chi2(&next, &m).unwrap());
            assert!(c1.sqrt() <= c0.sqrt() + 1e-6, "trial {trial}: {c0} -> {c1}");
        }
    }

    #[test]
    fn hio_cases() {
        let d = Dims::cube(8);
        let (obj, support) = object(d, 5);
        let m = raw_magnitude(&obj);
        assert!(max_diff(&hio_step(&obj, &m, &support, 0.9).unwrap(), &obj) < 1e-5);

        // formula at one outside voxel: rho = 1, proj = 0.5, beta = 0.9
        let proj = 0.5f64;
        let rho = 1.0f64;
        assert!((rho - 0.9 * proj - 0.55).abs() < 1e-12);

        let noisy = obj.map(|c| c + Complex32::new(0.3, 0.1));
        let frozen = hio_step(&noisy, &m, &support, 0.0).unwrap();
        for ((a, b), &s) in frozen.data().iter().zip(noisy.data()).zip(support.mask()) {
            if !s {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn hio_outside_update_matches_formula() {
        let d = Dims::cube(4);
        let rho = ComplexVolume::filled(d, Complex32::new(1.0, 0.0));
        let m = RealVolume::from_fn(d, |x, y, z| ((x + y + z) % 3) as f32);
        let mut mask = vec![false; d.len()];
        mask[0] = true;
        let support = Support::from_mask(d, mask).unwrap();
        let proj = modulus_project(&rho, &m).unwrap();
        let out = hio_step(&rho, &m, &support, 0.9).unwrap();
        for i in 1..d.len() {
            let want = Complex32::new(1.0, 0.0) - proj.data()[i] * 0.9;
            assert!((out.data()[i] - want).norm() < 1e-6);
        }
    }

    #[test]
    fn shrinkwrap_cases() {
        let d = Dims::cube(8);
        let (obj, support) = object(d, 6);
        let amp = magnitude(&obj);
        let no_blur = shrinkwrap(&obj, 0.0, 0.5).unwrap();
        let max = amp.max();
        for (i, &s) in no_blur.mask().iter().enumerate() {
            assert_eq!(s, amp.data()[i] >= 0.5 * max);
        }
        let low = shrinkwrap(&obj, 1.0, 0.05).unwrap();
        let high = shrinkwrap(&obj, 1.0, 0.5).unwrap();
        assert!(low.count() >= high.count());
        for (&l, &h) in low.mask().iter().zip(high.mask()) {
            assert!(l || !h);
        }
        // a low threshold keeps the whole blob
        for (&l, &s) in low.mask().iter().zip(support.mask()) {
            assert!(l || !s);
        }
    }

    #[test]
    fn schedule_and_history_length() {
        let cfg = PRConfig::default();
        assert_eq!(cfg.algorithm_at(0), Algorithm::Hio);
        assert_eq!(cfg.algorithm_at(39), Algorithm::Hio);
        assert_eq!(cfg.algorithm_at(40), Algorithm::Er);
        assert_eq!(cfg.algorithm_at(60), Algorithm::Hio);
        let (obj, _) = object(Dims::cube(8), 7);
        let m = raw_magnitude(&obj);
        let res = run_phase_retrieval(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(res.chi2_history.len(), 620);
        assert!(res.object.all_finite());
        assert!(res.support.count() > 0);
    }

    #[test]
    fn ground_truth_start_is_preserved() {
        let (obj, _) = object(Dims::cube(16), 8);
        let m = raw_magnitude(&obj);
        let cfg = PRConfig {
            init: Init::Provided(obj.clone()),
            shrinkwrap_interval: 0,
            total_iters: 100,
            ..PRConfig::default()
        };
        let res = run_phase_retrieval(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(res.chi2_history.iter().all(|&c| c <= 1e-8), "{:?}", res.chi2_history.iter().cloned().fold(0.0, f64::max));
        assert!(res.final_chi2 <= 1e-8);
    }

    #[test]
    fn box_initial_support_is_centered_half() {
        let d = Dims::cube(8);
        let mut fft = Fft3::new(d);
        let s = InitialSupport::Box { fraction: 0.5 }.build(&vec![1.0; d.len()], d, &mut fft);
        assert_eq!(s.count(), 64);
        assert!(s.mask()[d.index(2, 2, 2)] && s.mask()[d.index(5, 5, 5)]);
        assert!(!s.mask()[d.index(1, 4, 4)] && !s.mask()[d.index(4, 6, 4)]);
        // flat magnitude: autocorrelation is a delta at the center
        let a = InitialSupport::Autocorrelation { threshold: 0.5 }.build(&vec![1.0; d.len()], d, &mut fft);
        assert_eq!(a.count(), 1);
        assert!(a.mask()[d.index(4, 4, 4)]);
    }

    #[test]
    fn restarts_are_deterministic() {
        let (obj, _) = object(Dims::cube(8), 10);
        let m = raw_magnitude(&obj);
        let cfg = PRConfig { total_iters: 40, ..PRConfig::default() };
        let a = run_restarts(&m, &cfg, 3, 5).unwrap();
        let b = run_restarts(&m, &cfg, 3, 5).unwrap();
        assert_eq!(a.object, b.object);
        assert_eq!(a.chi2_history, b.chi2_history);
    }

    #[test]
    fn twin_start_gives_twin_result() {
        let d = Dims::cube(16);
        let (obj, support) = object(d, 11);
        let m = raw_magnitude(&obj);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let start = ComplexVolume::from_fn(d, |x, y, z| {
            let s = support.mask()[d.index(x, y, z)];
            let v = Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if s { v } else { Complex32::default() }
        });
        let twin = crate::eval::conjugate_twin(&start).unwrap();
        let cfg = |init| PRConfig { init, total_iters: 80, ..PRConfig::default() };
        let a = run_phase_retrieval(&m, &cfg(Init::Provided(start)), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = run_phase_retrieval(&m, &cfg(Init::Provided(twin)), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bt = crate::eval::conjugate_twin(&b.object).unwrap();
        assert!(max_diff(&a.object, &bt) < 1e-4, "{}", max_diff(&a.object, &bt));
        for (x, y) in a.chi2_history.iter().zip(&b.chi2_history) {
            assert!((x - y).abs() <= 1e-6 * x.max(1e-3));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let m = RealVolume::filled(Dims::cube(4), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            PRConfig { beta: 0.0, ..PRConfig::default() },
            PRConfig { average_last: 0, ..PRConfig::default() },
            PRConfig { total_iters: 5, average_last: 6, ..PRConfig::default() },
            PRConfig { shrinkwrap_threshold: 1.0, ..PRConfig::default() },
            PRConfig { initial_support: InitialSupport::Box { fraction: 0.0 }, ..PRConfig::default() },
        ] {
            assert!(run_phase_retrieval(&m, &cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn normalized_forward_magnitude_is_accepted() {
        let (obj, _) = object(Dims::cube(8), 9);
        let shape = magnitude(&obj);
        let m = simulate_diffraction(&shape, &obj.phase(), &ForwardConfig::default()).unwrap();
        let cfg = PRConfig { total_iters: 60, ..PRConfig::default() };
        let res = run_phase_retrieval(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(res.final_chi2.is_finite());
    }
}
