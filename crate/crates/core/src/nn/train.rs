//! Four-stage training schedule and inference.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{loss_and_head_grads, LossTargets, TermMask, Workspace};
use super::{FeatureMap, LossTerms, Mode, NetworkConfig, NetworkWeights, Prediction, Scalar};
use crate::crystalgen::{mix_seed, TrainingSample};
use crate::error::{Error, Result};
use crate::refine::MagnitudeLoss;
use crate::volume::RealVolume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs of each of the four stages.
    pub epochs: [usize; 4],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the diffraction-magnitude term.
    pub physics_weight: f64,
    pub smoothing_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: [10, 10, 5, 5],
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            physics_weight: 1.0,
            smoothing_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self { epochs: [50; 4], batch_size: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "TrainConfig", msg });
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.physics_weight >= 0.0) {
            return bad(format!("physics_weight must be >= 0, got {}", self.physics_weight));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0 && self.smoothing_eps > 0.0) {
            return bad("learning_rate, adam_eps and smoothing_eps must be positive".into());
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Which groups a stage updates and which supervised terms it uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub trainable: [bool; 3],
    pub terms: TermMask,
}

/// Encoder + shape decoder; phase decoder alone; encoder + phase decoder;
/// everything. Index order of `trainable` follows [`Group`].
pub const STAGES: [StageSpec; 4] = [
    StageSpec { trainable: [true, true, false], terms: TermMask { shape: true, phase: false } },
    StageSpec { trainable: [false, false, true], terms: TermMask { shape: false, phase: true } },
    StageSpec { trainable: [true, false, true], terms: TermMask { shape: false, phase: true } },
    StageSpec { trainable: [true, true, true], terms: TermMask::ALL },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based stage number.
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub train: LossTerms,
    pub validation: LossTerms,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation metrics of the untrained network.
    pub baseline: LossTerms,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn stage(&self, stage: usize) -> impl Iterator<Item = &EpochMetrics> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

struct Adam {
    m: NetworkWeights<f32>,
    v: NetworkWeights<f32>,
    t: i32,
}

impl Adam {
    fn new(cfg: &NetworkConfig) -> Result<Self> {
        Ok(Self { m: NetworkWeights::zeros(cfg)?, v: NetworkWeights::zeros(cfg)?, t: 0 })
    }

    fn step(&mut self, w: &mut NetworkWeights<f32>, g: &NetworkWeights<f32>, trainable: [bool; 3], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        let groups = w.groups();
        for (li, group) in groups.iter().enumerate() {
            if !trainable[group.index()] {
                continue;
            }
            let (wl, gl) = (&mut w.layers[li], &g.layers[li]);
            let (ml, vl) = (&mut self.m.layers[li], &mut self.v.layers[li]);
            let pairs = wl
                .weight
                .iter_mut()
                .zip(&gl.weight)
                .zip(ml.weight.iter_mut().zip(vl.weight.iter_mut()))
                .chain(wl.bias.iter_mut().zip(&gl.bias).zip(ml.bias.iter_mut().zip(vl.bias.iter_mut())));
            for ((p, &gv), (mv, vv)) in pairs {
                let gv = gv as f64;
                let m = b1 * *mv as f64 + (1.0 - b1) * gv;
                let v = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = m as f32;
                *vv = v as f32;
                *p -= (lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps)) as f32;
            }
        }
    }
}

fn sample_targets(s: &TrainingSample) -> Vec<f64> {
    s.magnitude.data().iter().map(|&v| v as f64).collect()
}

/// Parameter gradient and loss terms of one sample under `stage`, with
/// dropout masks drawn from `dropout_seed`.
pub fn sample_gradient<T: Scalar>(
    w: &NetworkWeights<T>,
    s: &TrainingSample,
    stage: StageSpec,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<(NetworkWeights<T>, LossTerms)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut ws = Workspace::default();
    let tape = w.forward_tape(&FeatureMap::from_volume(&s.magnitude), Mode::Train(&mut rng), &mut ws)?;
    let mag = sample_targets(s);
    let target = LossTargets { shape: s.shape.data(), phase: s.phase.data(), magnitude: &mag };
    let mut loss = MagnitudeLoss::new(s.magnitude.dims(), cfg.smoothing_eps, true);
    let (terms, gs, gp) = loss_and_head_grads(
        tape.shape().data(),
        tape.phase().data(),
        &target,
        cfg.physics_weight,
        stage.terms,
        &mut loss,
    );
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let d = s.magnitude.dims();
    let gs = FeatureMap::new(1, 1, d, gs)?;
    let gp = FeatureMap::new(1, 1, d, gp)?;
    Ok((w.backward(&tape, &gs, &gp, stage.trainable, &mut ws)?, terms))
}

fn add_terms(acc: &mut LossTerms, t: &LossTerms) {
    acc.shape_mae += t.shape_mae;
    acc.phase_mae += t.phase_mae;
    acc.physics += t.physics;
    acc.total += t.total;
}

fn scale_terms(acc: &mut LossTerms, k: f64) {
    acc.shape_mae *= k;
    acc.phase_mae *= k;
    acc.physics *= k;
    acc.total *= k;
}

/// Mean eval-mode loss terms over `set`, with `total` using `mask`.
pub fn evaluate_set(
    w: &NetworkWeights<f32>,
    set: &[TrainingSample],
    cfg: &TrainConfig,
    mask: TermMask,
) -> Result<LossTerms> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<LossTerms> = set
        .par_iter()
        .map(|s| {
            let tape = w.forward_tape(&FeatureMap::from_volume(&s.magnitude), Mode::Eval, &mut Workspace::default())?;
            let mag = sample_targets(s);
            let target = LossTargets { shape: s.shape.data(), phase: s.phase.data(), magnitude: &mag };
            let mut loss = MagnitudeLoss::new(s.magnitude.dims(), cfg.smoothing_eps, true);
            let (terms, _, _) =
                loss_and_head_grads(tape.shape().data(), tape.phase().data(), &target, cfg.physics_weight, mask, &mut loss);
            Ok(terms)
        })
        .collect::<Result<_>>()?;
    let mut acc = LossTerms::default();
    per.iter().for_each(|t| add_terms(&mut acc, t));
    scale_terms(&mut acc, 1.0 / set.len() as f64);
    Ok(acc)
}

/// Trains from a seeded initialization through the four stages.
pub fn train(
    train_set: &[TrainingSample],
    validation: &[TrainingSample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkWeights<f32>, TrainReport)> {
    let weights = NetworkWeights::init(net_cfg, mix_seed(cfg.seed))?;
    train_from(weights, train_set, validation, cfg)
}

/// Same as [`train`], starting from given weights.
pub fn train_from(
    mut weights: NetworkWeights<f32>,
    train_set: &[TrainingSample],
    validation: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(NetworkWeights<f32>, TrainReport)> {
    cfg.validate()?;
    weights.config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = weights.config.dims();
    if let Some(bad) = train_set.iter().chain(validation).find(|s| s.magnitude.dims() != dims) {
        return Err(Error::DimMismatch { left: bad.magnitude.dims(), right: dims });
    }
    let baseline = evaluate_set(&weights, validation, cfg, TermMask::ALL)?;
    log::info!(
        "untrained validation: shape {:.4} phase {:.4} physics {:.6}",
        baseline.shape_mae,
        baseline.phase_mae,
        baseline.physics
    );
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for (si, &stage) in STAGES.iter().enumerate() {
        let mut adam = Adam::new(&weights.config)?;
        for epoch in 0..cfg.epochs[si] {
            let start = Instant::now();
            let epoch_seed = mix_seed(cfg.seed ^ mix_seed(((si as u64) << 32) | epoch as u64));
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            let mut train_terms = LossTerms::default();
            for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
                let results: Vec<(NetworkWeights<f32>, LossTerms)> = batch
                    .par_iter()
                    .map(|&i| {
                        let seed = mix_seed(epoch_seed ^ mix_seed(i as u64 + 1));
                        sample_gradient(&weights, &train_set[i], stage, cfg, seed)
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| match e {
                        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration: bi },
                        e => e,
                    })?;
                let mut iter = results.into_iter();
                let (mut grad, first) = iter.next().expect("non-empty batch");
                add_terms(&mut train_terms, &first);
                for (g, t) in iter {
                    add_terms(&mut train_terms, &t);
                    for (a, b) in grad.layers.iter_mut().zip(&g.layers) {
                        a.weight.iter_mut().zip(&b.weight).for_each(|(x, &y)| *x += y);
                        a.bias.iter_mut().zip(&b.bias).for_each(|(x, &y)| *x += y);
                    }
                }
                let k = 1.0 / batch.len() as f32;
                for l in &mut grad.layers {
                    l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= k);
                }
                adam.step(&mut weights, &grad, stage.trainable, cfg);
            }
            scale_terms(&mut train_terms, 1.0 / train_set.len() as f64);
            let validation_terms = evaluate_set(&weights, validation, cfg, stage.terms)?;
            let m = EpochMetrics {
                stage: si + 1,
                epoch: epoch + 1,
                train: train_terms,
                validation: validation_terms,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "stage {} epoch {}: train {:.5} | val shape {:.4} phase {:.4} physics {:.6} ({:.1}s)",
                m.stage,
                m.epoch,
                m.train.total,
                m.validation.shape_mae,
                m.validation.phase_mae,
                m.validation.physics,
                m.seconds
            );
            epochs.push(m);
        }
    }
    if !weights.all_finite() {
        return Err(Error::NonFiniteLoss { iteration: epochs.len() });
    }
    Ok((weights, TrainReport { baseline, epochs }))
}

/// Eval-mode prediction and its wall time.
pub fn predict(m: &RealVolume, weights: &NetworkWeights<f32>) -> Result<(Prediction, Duration)> {
    let start = Instant::now();
    let p = super::forward_pass(m, weights, Mode::Eval)?;
    Ok((p, start.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;
    use crate::crystalgen::{generate_spec, make_sample, CrystalConfig};
    use crate::volume::{Dims, GridSpec};

    fn tiny() -> (NetworkConfig, Vec<TrainingSample>) {
        let grid = GridSpec::new(Dims::cube(8), 2.0).unwrap();
        let cfg = CrystalConfig { grid, box_padding: 1.0, ..CrystalConfig::default() };
        let samples = (0..6).map(|s| make_sample(&generate_spec(s, &cfg).unwrap(), &grid).unwrap()).collect();
        (NetworkConfig { input_dim: 8, encoder_channels: vec![2, 4], kernel: 3, dropout_rate: 0.1 }, samples)
    }

    #[test]
    fn freeze_contract_and_metric_counts() {
        let (net, samples) = tiny();
        let cfg = TrainConfig { epochs: [0, 2, 0, 0], batch_size: 2, ..TrainConfig::default() };
        let w0 = NetworkWeights::<f32>::init(&net, 1).unwrap();
        let (w1, report) = train_from(w0.clone(), &samples[..4], &samples[4..], &cfg).unwrap();
        assert_eq!(report.epochs.len(), 2);
        let mut phase_changed = false;
        for (li, g) in w0.groups().iter().enumerate() {
            if *g == Group::PhaseDecoder {
                phase_changed |= w0.layers[li] != w1.layers[li];
            } else {
                assert_eq!(w0.layers[li], w1.layers[li]);
            }
        }
        assert!(phase_changed);

        let cfg = TrainConfig { epochs: [2, 1, 1, 3], batch_size: 3, ..TrainConfig::default() };
        let (_, report) = train(&samples[..4], &samples[4..], &net, &cfg).unwrap();
        let per_stage: Vec<usize> = (1..=4).map(|s| report.stage(s).count()).collect();
        assert_eq!(per_stage, vec![2, 1, 1, 3]);
    }

    #[test]
    fn training_is_deterministic() {
        let (net, samples) = tiny();
        let cfg = TrainConfig { epochs: [1, 1, 1, 1], batch_size: 2, ..TrainConfig::default() };
        let a = train(&samples[..4], &samples[4..], &net, &cfg).unwrap();
        let b = train(&samples[..4], &samples[4..], &net, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.baseline, b.1.baseline);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (net, samples) = tiny();
        let r = train(&[], &samples, &net, &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn predict_is_deterministic() {
        let (net, samples) = tiny();
        let w = NetworkWeights::<f32>::init(&net, 3).unwrap();
        let (a, _) = predict(&samples[0].magnitude, &w).unwrap();
        let (b, _) = predict(&samples[0].magnitude, &w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape.dims(), samples[0].magnitude.dims());
    }
}
