//! Encoder / twin-decoder network, its tape-based backward pass and the
//! physics-aware loss.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::layers::{
    conv3d_backward_ws, conv3d_forward_ws, dropout_backward, dropout_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, upsample2_backward, upsample2_forward, ConvParams,
};
use super::{FeatureMap, Scalar};
use crate::error::{Error, Result};
use crate::refine::MagnitudeLoss;
use crate::volume::{Dims, RealVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { input_dim: 32, encoder_channels: vec![16, 32, 64], kernel: 3, dropout_rate: 0.1 }
    }
}

impl NetworkConfig {
    /// Full-size channel widths.
    pub fn full_scale() -> Self {
        Self { encoder_channels: vec![64, 128, 256], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "NetworkConfig", msg });
        let stages = self.encoder_channels.len();
        if stages == 0 || self.encoder_channels.contains(&0) {
            return bad("encoder_channels must be non-empty and positive".into());
        }
        if stages >= usize::BITS as usize || self.input_dim == 0 || !self.input_dim.is_multiple_of(1 << stages) {
            return bad(format!("input_dim {} not divisible by 2^{stages}", self.input_dim));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::cube(self.input_dim)
    }

    /// `(group, c_in, c_out)` of every convolution in serialization order:
    /// encoder, shape decoder (incl. output conv), phase decoder.
    pub fn layer_plan(&self) -> Vec<(Group, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = 1;
        for &c in &self.encoder_channels {
            plan.push((Group::Encoder, prev, c));
            prev = c;
        }
        let latent = prev;
        for g in [Group::ShapeDecoder, Group::PhaseDecoder] {
            let mut prev = latent;
            for &c in self.encoder_channels.iter().rev() {
                plan.push((g, prev, c));
                prev = c;
            }
            plan.push((g, prev, 1));
        }
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    ShapeDecoder,
    PhaseDecoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::ShapeDecoder, Group::PhaseDecoder];

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    pub config: NetworkConfig,
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Scalar> NetworkWeights<T> {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_plan()
            .into_iter()
            .map(|(_, ci, co)| ConvParams::zeros(ci, co, config.kernel))
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    /// Uniform `[-a, a]` kernels with `a = sqrt(6 / fan_in)`, zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut w.layers {
            let a = (6.0 / l.fan_in() as f64).sqrt();
            l.weight.iter_mut().for_each(|v| *v = T::from_f64(rng.random_range(-a..a)));
        }
        Ok(w)
    }

    pub fn groups(&self) -> Vec<Group> {
        self.config.layer_plan().into_iter().map(|(g, _, _)| g).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    k: l.k,
                    weight: l.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Flat view `(layer, is_bias, index)` of parameter `i`.
    pub fn locate(&self, mut i: usize) -> Option<(usize, bool, usize)> {
        for (li, l) in self.layers.iter().enumerate() {
            if i < l.weight.len() {
                return Some((li, false, i));
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return Some((li, true, i));
            }
            i -= l.bias.len();
        }
        None
    }

    pub fn param(&self, i: usize) -> T {
        let (l, b, j) = self.locate(i).expect("parameter index in range");
        if b { self.layers[l].bias[j] } else { self.layers[l].weight[j] }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut T {
        let (l, b, j) = self.locate(i).expect("parameter index in range");
        if b { &mut self.layers[l].bias[j] } else { &mut self.layers[l].weight[j] }
    }

    fn stages(&self) -> usize {
        self.config.encoder_channels.len()
    }

    fn decoder_range(&self, g: Group) -> std::ops::Range<usize> {
        let s = self.stages();
        match g {
            Group::Encoder => 0..s,
            Group::ShapeDecoder => s..2 * s + 1,
            Group::PhaseDecoder => 2 * s + 1..3 * s + 2,
        }
    }

    pub(crate) fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.dims() != self.config.dims() || x.channels() != 1 {
            return Err(Error::ShapeMismatch {
                op: "forward_pass",
                msg: format!("input {}x{} but network expects 1x{}", x.channels(), x.dims(), self.config.dims()),
            });
        }
        if self.layers.len() != self.config.layer_plan().len() {
            return Err(Error::ShapeMismatch { op: "forward_pass", msg: "weights do not match the layer plan".into() });
        }
        Ok(())
    }
}

/// Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

struct StageCache<T> {
    conv_in: FeatureMap<T>,
    act: FeatureMap<T>,
    mask: Option<Vec<T>>,
    pool: Option<(Vec<u8>, Dims)>,
}

struct DecoderCache<T> {
    stages: Vec<StageCache<T>>,
    final_in: FeatureMap<T>,
    head: FeatureMap<T>,
}

pub(crate) struct Tape<T> {
    encoder: Vec<StageCache<T>>,
    shape: DecoderCache<T>,
    phase: DecoderCache<T>,
}

impl<T> Tape<T> {
    pub(crate) fn shape(&self) -> &FeatureMap<T> {
        &self.shape.head
    }

    pub(crate) fn phase(&self) -> &FeatureMap<T> {
        &self.phase.head
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

/// Reusable im2col buffer.
#[derive(Default)]
pub(crate) struct Workspace<T> {
    col: Vec<T>,
}

impl<T: Scalar> NetworkWeights<T> {
    fn run_stage(
        &self,
        layer: usize,
        conv_in: FeatureMap<T>,
        pool: bool,
        mode: &mut Mode<'_>,
        ws: &mut Workspace<T>,
    ) -> Result<(FeatureMap<T>, StageCache<T>)> {
        let act = relu_forward(&conv3d_forward_ws(&conv_in, &self.layers[layer], &mut ws.col)?);
        let rng: Option<&mut dyn RngCore> = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(&mut **r),
        };
        let (dropped, mask) = dropout_forward(&act, self.config.dropout_rate, rng)?;
        let (out, pool) = if pool {
            let (p, arg) = maxpool2_forward(&dropped)?;
            (p, Some((arg, dropped.dims())))
        } else {
            (dropped, None)
        };
        Ok((out, StageCache { conv_in, act, mask, pool }))
    }

    fn run_decoder(
        &self,
        g: Group,
        latent: &FeatureMap<T>,
        mode: &mut Mode<'_>,
        ws: &mut Workspace<T>,
    ) -> Result<DecoderCache<T>> {
        let range = self.decoder_range(g);
        let mut cur = latent.clone();
        let mut stages = Vec::new();
        for layer in range.start..range.end - 1 {
            let up = upsample2_forward(&cur);
            let (out, cache) = self.run_stage(layer, up, false, mode, ws)?;
            stages.push(cache);
            cur = out;
        }
        let z = conv3d_forward_ws(&cur, &self.layers[range.end - 1], &mut ws.col)?;
        let head = match g {
            Group::ShapeDecoder => z.map(|&v| sigmoid(v)),
            _ => z.map(|&v| T::from_f64(PI) * v.tanh()),
        };
        Ok(DecoderCache { stages, final_in: cur, head })
    }

    pub(crate) fn forward_tape(&self, x: &FeatureMap<T>, mut mode: Mode<'_>, ws: &mut Workspace<T>) -> Result<Tape<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut encoder = Vec::new();
        for layer in self.decoder_range(Group::Encoder) {
            let (out, cache) = self.run_stage(layer, cur, true, &mut mode, ws)?;
            encoder.push(cache);
            cur = out;
        }
        let shape = self.run_decoder(Group::ShapeDecoder, &cur, &mut mode, ws)?;
        let phase = self.run_decoder(Group::PhaseDecoder, &cur, &mut mode, ws)?;
        Ok(Tape { encoder, shape, phase })
    }

    /// Backward through one stage: grad w.r.t. the stage output in, grad
    /// w.r.t. its conv input out (if requested).
    fn stage_backward(
        &self,
        layer: usize,
        cache: &StageCache<T>,
        grad: FeatureMap<T>,
        need_params: bool,
        need_input: bool,
        grads: &mut NetworkWeights<T>,
        ws: &mut Workspace<T>,
    ) -> Result<Option<FeatureMap<T>>> {
        let g = match &cache.pool {
            Some((arg, dims)) => maxpool2_backward(&grad, arg, *dims)?,
            None => grad,
        };
        let g = dropout_backward(&g, cache.mask.as_deref());
        let g = relu_backward(&cache.act, &g)?;
        let cg = conv3d_backward_ws(&cache.conv_in, &self.layers[layer], &g, need_input, need_params, &mut ws.col)?;
        if need_params {
            add_into(&mut grads.layers[layer], &cg.grad_weight, &cg.grad_bias);
        }
        Ok(cg.grad_x)
    }

    fn decoder_backward(
        &self,
        g: Group,
        cache: &DecoderCache<T>,
        grad_head: &FeatureMap<T>,
        train: [bool; 3],
        grads: &mut NetworkWeights<T>,
        ws: &mut Workspace<T>,
    ) -> Result<Option<FeatureMap<T>>> {
        let own = train[g.index()];
        let enc = train[Group::Encoder.index()];
        if !own && !enc {
            return Ok(None);
        }
        let range = self.decoder_range(g);
        let mut gz = grad_head.clone();
        for (d, &y) in gz.data_mut().iter_mut().zip(cache.head.data()) {
            *d *= match g {
                Group::ShapeDecoder => y * (T::ONE - y),
                _ => {
                    let t = y / T::from_f64(PI);
                    T::from_f64(PI) * (T::ONE - t * t)
                }
            };
        }
        let last = range.end - 1;
        let cg = conv3d_backward_ws(&cache.final_in, &self.layers[last], &gz, true, own, &mut ws.col)?;
        if own {
            add_into(&mut grads.layers[last], &cg.grad_weight, &cg.grad_bias);
        }
        let mut cur = cg.grad_x.expect("input grad requested");
        for (i, layer) in (range.start..last).enumerate().rev() {
            let need_input = i > 0 || enc;
            match self.stage_backward(layer, &cache.stages[i], cur, own, need_input, grads, ws)? {
                Some(gx) => cur = upsample2_backward(&gx)?,
                None => return Ok(None),
            }
        }
        Ok(Some(cur))
    }

    /// Gradients of a loss with the given head gradients; only groups marked
    /// in `train` receive (non-zero) parameter gradients.
    pub(crate) fn backward(
        &self,
        tape: &Tape<T>,
        grad_shape: &FeatureMap<T>,
        grad_phase: &FeatureMap<T>,
        train: [bool; 3],
        ws: &mut Workspace<T>,
    ) -> Result<NetworkWeights<T>> {
        let mut grads = NetworkWeights::zeros(&self.config)?;
        let gs = self.decoder_backward(Group::ShapeDecoder, &tape.shape, grad_shape, train, &mut grads, ws)?;
        let gp = self.decoder_backward(Group::PhaseDecoder, &tape.phase, grad_phase, train, &mut grads, ws)?;
        if !train[Group::Encoder.index()] {
            return Ok(grads);
        }
        let mut g = match (gs, gp) {
            (Some(mut a), Some(b)) => {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Ok(grads),
        };
        for (i, layer) in self.decoder_range(Group::Encoder).enumerate().rev() {
            match self.stage_backward(layer, &tape.encoder[i], g, true, i > 0, &mut grads, ws)? {
                Some(gx) => g = gx,
                None => break,
            }
        }
        Ok(grads)
    }
}

fn add_into<T: Scalar>(p: &mut ConvParams<T>, gw: &[T], gb: &[T]) {
    p.weight.iter_mut().zip(gw).for_each(|(a, &b)| *a += b);
    p.bias.iter_mut().zip(gb).for_each(|(a, &b)| *a += b);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub shape: RealVolume,
    pub phase: RealVolume,
}

/// Network outputs for a (normalized) magnitude volume.
pub fn forward_pass<T: Scalar>(m: &RealVolume, weights: &NetworkWeights<T>, mode: Mode<'_>) -> Result<Prediction> {
    let x = FeatureMap::<T>::from_volume(m);
    let tape = weights.forward_tape(&x, mode, &mut Workspace::default())?;
    Ok(Prediction { shape: tape.shape.head.to_volume(0, 0), phase: tape.phase.head.to_volume(0, 0) })
}

/// Components of the training objective. `total` only includes the
/// supervised terms enabled for the stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub shape_mae: f64,
    pub phase_mae: f64,
    pub physics: f64,
    pub total: f64,
}

/// Which supervised terms enter the loss; the physics term always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub shape: bool,
    pub phase: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask { shape: true, phase: true };
}

pub(crate) struct LossTargets<'a> {
    pub shape: &'a [f32],
    pub phase: &'a [f32],
    pub magnitude: &'a [f64],
}

/// Loss and its gradients with respect to both heads.
pub(crate) fn loss_and_head_grads<T: Scalar>(
    shape: &[T],
    phase: &[T],
    target: &LossTargets<'_>,
    lambda: f64,
    mask: TermMask,
    loss: &mut MagnitudeLoss,
) -> (LossTerms, Vec<T>, Vec<T>) {
    let n = shape.len() as f64;
    let mut terms = LossTerms::default();
    let mut gs = vec![T::ZERO; shape.len()];
    let mut gp = vec![T::ZERO; shape.len()];
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for i in 0..shape.len() {
        let ds = shape[i].to_f64() - target.shape[i] as f64;
        let dp = phase[i].to_f64() - target.phase[i] as f64;
        terms.shape_mae += ds.abs();
        terms.phase_mae += dp.abs();
        if mask.shape {
            gs[i] = T::from_f64(sign(ds) / n);
        }
        if mask.phase {
            gp[i] = T::from_f64(sign(dp) / n);
        }
    }
    terms.shape_mae /= n;
    terms.phase_mae /= n;
    let rho: Vec<Complex64> = shape
        .iter()
        .zip(phase)
        .map(|(s, p)| Complex64::from_polar(s.to_f64(), p.to_f64()))
        .collect();
    let mut g = vec![Complex64::default(); rho.len()];
    terms.physics = if lambda > 0.0 {
        let v = loss.value_and_gradient(&rho, target.magnitude, &mut g);
        for i in 0..rho.len() {
            let (s, p) = (shape[i].to_f64(), phase[i].to_f64());
            let (sin, cos) = p.sin_cos();
            gs[i] += T::from_f64(lambda * (g[i].re * cos + g[i].im * sin));
            gp[i] += T::from_f64(lambda * s * (g[i].im * cos - g[i].re * sin));
        }
        v
    } else {
        loss.value(&rho, target.magnitude)
    };
    terms.total = lambda * terms.physics
        + if mask.shape { terms.shape_mae } else { 0.0 }
        + if mask.phase { terms.phase_mae } else { 0.0 };
    (terms, gs, gp)
}

/// `MAE(shape) + MAE(phase) + lambda * magnitude_mae(recombine(pred), m)`.
pub fn physics_loss(
    shape_pred: &RealVolume,
    phase_pred: &RealVolume,
    shape_true: &RealVolume,
    phase_true: &RealVolume,
    m: &RealVolume,
    lambda: f64,
    smoothing_eps: f64,
) -> Result<LossTerms> {
    for v in [phase_pred, shape_true, phase_true, m] {
        shape_pred.require_same_dims(v)?;
    }
    shape_pred.dims().require_even("physics_loss")?;
    let mut loss = MagnitudeLoss::new(shape_pred.dims(), smoothing_eps, true);
    let mag: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let target = LossTargets { shape: shape_true.data(), phase: phase_true.data(), magnitude: &mag };
    let (terms, _, _) =
        loss_and_head_grads(shape_pred.data(), phase_pred.data(), &target, lambda, TermMask::ALL, &mut loss);
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystalgen::{generate_spec, make_sample, CrystalConfig};
    use crate::refine::{magnitude_mae, RefineConfig};
    use crate::volume::{recombine, GridSpec};

    fn small_config() -> NetworkConfig {
        NetworkConfig { input_dim: 8, encoder_channels: vec![2, 3], kernel: 3, dropout_rate: 0.1 }
    }

    fn random_volume(d: Dims, seed: u64, lo: f32, hi: f32) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(d, |_, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn layer_plan_and_validation() {
        let cfg = NetworkConfig::default();
        let plan = cfg.layer_plan();
        assert_eq!(plan.len(), 3 + 2 * 4);
        assert_eq!(plan[0], (Group::Encoder, 1, 16));
        assert_eq!(plan[3], (Group::ShapeDecoder, 64, 64));
        assert_eq!(plan[6], (Group::ShapeDecoder, 16, 1));
        assert_eq!(plan[10], (Group::PhaseDecoder, 16, 1));
        assert!(NetworkConfig { input_dim: 20, ..cfg.clone() }.validate().is_err());
        assert!(NetworkConfig { kernel: 4, ..cfg.clone() }.validate().is_err());
        assert!(NetworkConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn outputs_mirror_input_and_respect_head_ranges() {
        let cfg = NetworkConfig::default();
        let w = NetworkWeights::<f32>::init(&cfg, 1).unwrap();
        let m = random_volume(cfg.dims(), 2, 0.0, 1.0);
        let p = forward_pass(&m, &w, Mode::Eval).unwrap();
        assert_eq!(p.shape.dims(), Dims::cube(32));
        assert_eq!(p.shape.len() + p.phase.len(), 65_536);
        assert!(p.shape.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.phase.data().iter().all(|&v| v.abs() < std::f32::consts::PI));
        assert_eq!(forward_pass(&m, &w, Mode::Eval).unwrap(), p);
    }

    #[test]
    fn activations_stay_bounded_at_init() {
        let cfg = NetworkConfig::default();
        let w = NetworkWeights::<f32>::init(&cfg, 3).unwrap();
        let m = random_volume(cfg.dims(), 4, 0.0, 1.0);
        let tape = w.forward_tape(&FeatureMap::from_volume(&m), Mode::Eval, &mut Workspace::default()).unwrap();
        for c in tape.encoder.iter().chain(&tape.shape.stages).chain(&tape.phase.stages) {
            assert!(c.act.all_finite());
            assert!(c.act.data().iter().all(|v| v.abs() < 1e6));
        }
    }

    #[test]
    fn wrong_input_dims_rejected() {
        let w = NetworkWeights::<f32>::init(&small_config(), 0).unwrap();
        assert!(forward_pass(&RealVolume::zeros(Dims::cube(16)), &w, Mode::Eval).is_err());
    }

    #[test]
    fn physics_loss_cases() {
        let d = Dims::cube(4);
        let s = random_volume(d, 5, 0.1, 0.9);
        let p = random_volume(d, 6, -1.0, 1.0);
        let s2 = random_volume(d, 7, 0.1, 0.9);
        let p2 = random_volume(d, 8, -1.0, 1.0);
        let m = RealVolume::filled(d, 0.5);
        let t = physics_loss(&s, &p, &s2, &p2, &m, 0.0, 1e-8).unwrap();
        let mut want = 0.0;
        for i in 0..d.len() {
            want += (s.data()[i] as f64 - s2.data()[i] as f64).abs() + (p.data()[i] as f64 - p2.data()[i] as f64).abs();
        }
        assert!((t.total - want / d.len() as f64).abs() < 1e-12);

        let grid = GridSpec::new(Dims::cube(16), 2.0).unwrap();
        let cfg = CrystalConfig { grid, ..CrystalConfig::default() };
        let sample = make_sample(&generate_spec(3, &cfg).unwrap(), &grid).unwrap();
        let t = physics_loss(&sample.shape, &sample.phase, &sample.shape, &sample.phase, &sample.magnitude, 1.0, 1e-8)
            .unwrap();
        assert!(t.total <= 2e-8 + 1e-7, "{t:?}");
        let obj = recombine(&sample.shape, &sample.phase).unwrap();
        let direct = magnitude_mae(&obj, &sample.magnitude, &RefineConfig::default()).unwrap();
        // recombine rounds the object to f32; the loss keeps it in f64
        assert!((t.physics - direct).abs() < 1e-9, "{} vs {direct}", t.physics);
        let noisy = RealVolume::from_fn(grid.dims, |x, y, z| *sample.phase.at(x, y, z) + 0.3 * ((x + 2 * y + z) % 3) as f32);
        let t = physics_loss(&sample.shape, &noisy, &sample.shape, &sample.phase, &sample.magnitude, 1.0, 1e-8).unwrap();
        let direct = magnitude_mae(&recombine(&sample.shape, &noisy).unwrap(), &sample.magnitude, &RefineConfig::default())
            .unwrap();
        assert!(t.physics > 1e-4 && (t.physics - direct).abs() < 1e-5 * direct, "{} vs {direct}", t.physics);
    }

    /// Loss of the f64 network on one sample with a fixed dropout seed.
    fn network_loss<T: Scalar>(w: &NetworkWeights<T>, m: &RealVolume, target: &LossTargets<'_>, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = w
            .forward_tape(&FeatureMap::from_volume(m), Mode::Train(&mut rng), &mut Workspace::default())
            .unwrap();
        let mut loss = MagnitudeLoss::new(m.dims(), 1e-8, true);
        let (terms, _, _) =
            loss_and_head_grads(tape.shape().data(), tape.phase().data(), target, 1.0, TermMask::ALL, &mut loss);
        terms.total
    }

    fn setup(cfg: &NetworkConfig) -> (RealVolume, RealVolume, RealVolume, Vec<f64>) {
        let d = cfg.dims();
        let m = random_volume(d, 11, 0.0, 1.0);
        let shape = random_volume(d, 12, 0.0, 1.0);
        let phase = random_volume(d, 13, -1.0, 1.0);
        let mag = m.data().iter().map(|&v| v as f64).collect();
        (m, shape, phase, mag)
    }

    fn analytic<T: Scalar>(w: &NetworkWeights<T>, m: &RealVolume, target: &LossTargets<'_>, train: [bool; 3]) -> NetworkWeights<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ws = Workspace::default();
        let tape = w.forward_tape(&FeatureMap::from_volume(m), Mode::Train(&mut rng), &mut ws).unwrap();
        let mut loss = MagnitudeLoss::new(m.dims(), 1e-8, true);
        let (_, gs, gp) = loss_and_head_grads(tape.shape().data(), tape.phase().data(), target, 1.0, TermMask::ALL, &mut loss);
        let d = m.dims();
        let gs = FeatureMap::new(1, 1, d, gs).unwrap();
        let gp = FeatureMap::new(1, 1, d, gp).unwrap();
        w.backward(&tape, &gs, &gp, train, &mut ws).unwrap()
    }

    #[test]
    fn network_gradient_matches_finite_differences_f64() {
        let cfg = small_config();
        let w = NetworkWeights::<f64>::init(&cfg, 21).unwrap();
        let (m, shape, phase, mag) = setup(&cfg);
        let target = LossTargets { shape: shape.data(), phase: phase.data(), magnitude: &mag };
        let g = analytic(&w, &m, &target, [true; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let scale = (0..g.param_count()).map(|i| g.param(i).abs()).fold(0.0, f64::max);
        for _ in 0..40 {
            let i = rng.random_range(0..w.param_count());
            let (mut a, mut b) = (w.clone(), w.clone());
            *a.param_mut(i) += h;
            *b.param_mut(i) -= h;
            let fd = (network_loss(&a, &m, &target, 99) - network_loss(&b, &m, &target, 99)) / (2.0 * h);
            assert!((fd - g.param(i)).abs() <= 1e-5 * scale, "param {i}: fd {fd} vs {}", g.param(i));
        }
    }

    #[test]
    fn frozen_groups_get_zero_gradients() {
        let cfg = small_config();
        let w = NetworkWeights::<f64>::init(&cfg, 22).unwrap();
        let (m, shape, phase, mag) = setup(&cfg);
        let target = LossTargets { shape: shape.data(), phase: phase.data(), magnitude: &mag };
        let full = analytic(&w, &m, &target, [true; 3]);
        let only_phase = analytic(&w, &m, &target, [false, false, true]);
        let groups = w.groups();
        for (li, g) in groups.iter().enumerate() {
            let (a, b) = (&full.layers[li], &only_phase.layers[li]);
            if *g == Group::PhaseDecoder {
                assert_eq!(a, b);
            } else {
                assert!(b.weight.iter().chain(&b.bias).all(|&v| v == 0.0));
            }
        }
    }
}
