//! Gradient refinement of a complex object against a measured diffraction
//! magnitude: smoothed magnitude MAE, its closed-form adjoint, and ADAM.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Support;
use crate::volume::{ComplexVolume, Dims, Fft3, RealVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineLoss {
    #[default]
    MagnitudeMae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `s(x) = sqrt(x^2 + eps^2)` and the `|F|` guard.
    pub smoothing_eps: f64,
    pub loss: RefineLoss,
    /// Compare max-normalized `|F|` with `m`.
    pub normalize: bool,
    /// Zero voxels outside this support after every update.
    #[serde(skip)]
    pub support_constraint: Option<Support>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_size: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            smoothing_eps: 1e-8,
            loss: RefineLoss::MagnitudeMae,
            normalize: true,
            support_constraint: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "RefineConfig", msg });
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.adam_eps > 0.0 && self.smoothing_eps > 0.0) {
            return bad("adam_eps and smoothing_eps must be positive".into());
        }
        if !(self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// `L(rho) = mean_v s(A_v - m_v)` with `A = |F(rho)|`, divided by `max |F|`
/// when normalizing. Holds the FFT plan and work buffers for one grid.
pub struct MagnitudeLoss {
    fft: Fft3,
    spectrum: Vec<Complex64>,
    eps: f64,
    normalize: bool,
}

impl MagnitudeLoss {
    pub fn new(dims: Dims, smoothing_eps: f64, normalize: bool) -> Self {
        Self {
            fft: Fft3::new(dims),
            spectrum: vec![Complex64::default(); dims.len()],
            eps: smoothing_eps,
            normalize,
        }
    }

    pub fn dims(&self) -> Dims {
        self.fft.dims()
    }

    fn smooth(&self, x: f64) -> f64 {
        (x * x + self.eps * self.eps).sqrt()
    }

    /// Forward transform into `spectrum`; returns the max-normalization
    /// divisor if one applies.
    fn transform(&mut self, rho: &[Complex64]) -> Option<f64> {
        self.spectrum.copy_from_slice(rho);
        self.fft.forward_centered(&mut self.spectrum);
        if !self.normalize {
            return None;
        }
        let max = self.spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max);
        (max > 0.0).then_some(max)
    }

    pub fn value(&mut self, rho: &[Complex64], m: &[f64]) -> f64 {
        let scale = self.transform(rho).unwrap_or(1.0);
        let total: f64 = self
            .spectrum
            .iter()
            .zip(m)
            .map(|(f, &mv)| self.smooth(f.norm() / scale - mv))
            .sum();
        total / m.len() as f64
    }

    /// Loss and its gradient `dL/dRe(rho) + i dL/dIm(rho)`, written to `grad`.
    pub fn value_and_gradient(&mut self, rho: &[Complex64], m: &[f64], grad: &mut [Complex64]) -> f64 {
        let n = m.len() as f64;
        let divisor = self.transform(rho);
        let scale = divisor.unwrap_or(1.0);
        let eps = self.eps;
        let mut total = 0.0;
        // dL/dA_v before the normalization chain
        let mut through_max = 0.0;
        let mut argmax = 0;
        let mut best = f64::NEG_INFINITY;
        for (v, (g, (f, &mv))) in grad.iter_mut().zip(self.spectrum.iter().zip(m)).enumerate() {
            let abs = f.norm();
            if abs > best {
                best = abs;
                argmax = v;
            }
            let a = abs / scale;
            let r = a - mv;
            let s = (r * r + eps * eps).sqrt();
            total += s;
            let ds = r / s / n;
            through_max += ds * a;
            // dL/d|F_v| = ds / scale; stash it in the real part
            *g = Complex64::new(ds / scale, 0.0);
        }
        if divisor.is_some() {
            grad[argmax].re -= through_max / scale;
        }
        // dL/dF as a real pair = dL/d|F| * F / |F|
        for (g, f) in grad.iter_mut().zip(&self.spectrum) {
            let abs = f.norm();
            *g = if abs > 0.0 { *f * (g.re / abs) } else { Complex64::default() };
        }
        // adjoint of the unnormalized centered FFT is N * inverse
        self.fft.inverse_centered(grad);
        grad.iter_mut().for_each(|g| *g *= n);
        total / n
    }
}

fn check_dims(rho: &ComplexVolume, m: &RealVolume) -> Result<()> {
    rho.require_same_dims(m)?;
    rho.dims().require_even("magnitude_mae")
}

fn to_f64(m: &RealVolume) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

pub fn magnitude_mae(rho: &ComplexVolume, m: &RealVolume, cfg: &RefineConfig) -> Result<f64> {
    check_dims(rho, m)?;
    let mut loss = MagnitudeLoss::new(rho.dims(), cfg.smoothing_eps, cfg.normalize);
    Ok(loss.value(&rho.to_c64(), &to_f64(m)))
}

pub fn loss_gradient(rho: &ComplexVolume, m: &RealVolume, cfg: &RefineConfig) -> Result<ComplexVolume> {
    check_dims(rho, m)?;
    let mut loss = MagnitudeLoss::new(rho.dims(), cfg.smoothing_eps, cfg.normalize);
    let mut grad = vec![Complex64::default(); rho.len()];
    loss.value_and_gradient(&rho.to_c64(), &to_f64(m), &mut grad);
    ComplexVolume::from_c64(rho.dims(), &grad)
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    /// Lowest-loss iterate.
    pub object: ComplexVolume,
    /// Loss of the iterate entering each step.
    pub loss_history: Vec<f64>,
    pub best_iteration: usize,
}

impl RefineResult {
    pub fn best_loss(&self) -> f64 {
        self.loss_history[self.best_iteration]
    }
}

/// ADAM on the real and imaginary parts of every voxel.
pub fn refine(rho0: &ComplexVolume, m: &RealVolume, cfg: &RefineConfig) -> Result<RefineResult> {
    check_dims(rho0, m)?;
    if !rho0.all_finite() {
        return Err(Error::InvalidArgument { op: "refine", msg: "initial object has non-finite values".into() });
    }
    if let Some(s) = &cfg.support_constraint {
        if s.dims() != rho0.dims() {
            return Err(Error::DimMismatch { left: s.dims(), right: rho0.dims() });
        }
    }
    let (best, history, best_iteration) = refine_c64(rho0.dims(), rho0.to_c64(), &to_f64(m), cfg)?;
    Ok(RefineResult {
        object: ComplexVolume::from_c64(rho0.dims(), &best)?,
        loss_history: history,
        best_iteration,
    })
}

/// 64-bit refinement loop; returns (best iterate, loss history, best index).
pub fn refine_c64(
    dims: Dims,
    mut rho: Vec<Complex64>,
    m: &[f64],
    cfg: &RefineConfig,
) -> Result<(Vec<Complex64>, Vec<f64>, usize)> {
    cfg.validate()?;
    let mut loss = MagnitudeLoss::new(dims, cfg.smoothing_eps, cfg.normalize);
    let mut grad = vec![Complex64::default(); dims.len()];
    let mut m1 = vec![Complex64::default(); dims.len()];
    let mut m2 = vec![Complex64::default(); dims.len()];
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best = rho.clone();
    let mut best_index = 0;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for t in 0..cfg.iterations {
        let value = loss.value_and_gradient(&rho, m, &mut grad);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        if history.iter().all(|&h| value < h) {
            best.copy_from_slice(&rho);
            best_index = t;
        }
        history.push(value);
        let c1 = 1.0 - b1.powi(t as i32 + 1);
        let c2 = 1.0 - b2.powi(t as i32 + 1);
        for (((r, g), a), b) in rho.iter_mut().zip(&grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
            *a = b1 * *a + (1.0 - b1) * g;
            *b = Complex64::new(
                b2 * b.re + (1.0 - b2) * g.re * g.re,
                b2 * b.im + (1.0 - b2) * g.im * g.im,
            );
            let step = |mom: f64, var: f64| cfg.step_size * (mom / c1) / ((var / c2).sqrt() + cfg.adam_eps);
            r.re -= step(a.re, b.re);
            r.im -= step(a.im, b.im);
        }
        if let Some(s) = &cfg.support_constraint {
            for (r, &inside) in rho.iter_mut().zip(s.mask()) {
                if !inside {
                    *r = Complex64::default();
                }
            }
        }
    }
    Ok((best, history, best_index))
}
