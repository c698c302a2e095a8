//! Loss, reverse-mode gradients through the optical stack and the heads,
//! SGD with clamped heights, the epoch loop and evaluation.
//!
//! Complex cotangents follow the real-gradient convention: for a real
//! loss `L` of a complex sample `z = x + jy`, the cotangent is
//! `∂L/∂x + j·∂L/∂y`. Under it a complex-linear map `A` pulls back as
//! `A^H`, and `|z|²` pulls back as `2·(∂L/∂|z|²)·z`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_pattern, LabeledImage};
use crate::error::{config_err, Error, Result};
use crate::network::{
    ClassScores, ForwardTrace, Head, Network, NetworkConfig, PoolLayout, Simulator, Snapshot, NUM_CLASSES,
};
use crate::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
    MseOneHot,
}

fn check_label(label: usize) -> Result<()> {
    if label >= NUM_CLASSES {
        return config_err(format!("label {label} outside 0..=9"));
    }
    Ok(())
}

/// Cross-entropy `−ln p_label`, or squared error against the one-hot label.
pub fn loss(scores: &ClassScores, label: usize, kind: LossKind) -> Result<f64> {
    check_label(label)?;
    let p = &scores.probabilities;
    Ok(match kind {
        LossKind::SoftmaxCrossEntropy => {
            // log-softmax straight from the logits keeps tiny probabilities finite
            let m = scores.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - scores.logits[label]
        }
        LossKind::MseOneHot => p
            .iter()
            .enumerate()
            .map(|(c, &pc)| {
                let d = pc - if c == label { 1.0 } else { 0.0 };
                d * d
            })
            .sum(),
    })
}

/// `∂loss/∂logits`.
pub fn loss_logit_gradient(scores: &ClassScores, label: usize, kind: LossKind) -> Result<[f64; NUM_CLASSES]> {
    check_label(label)?;
    let p = &scores.probabilities;
    let mut g = [0.0; NUM_CLASSES];
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            g.copy_from_slice(p);
            g[label] -= 1.0;
        }
        LossKind::MseOneHot => {
            let r: Vec<f64> = (0..NUM_CLASSES).map(|c| 2.0 * (p[c] - if c == label { 1.0 } else { 0.0 })).collect();
            let dot: f64 = r.iter().zip(p).map(|(a, b)| a * b).sum();
            for k in 0..NUM_CLASSES {
                g[k] = p[k] * (r[k] - dot);
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `∂loss/∂parameters`, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Per mask, per pixel, in loss units per micrometer of height.
    pub masks: Vec<Vec<f64>>,
    pub fc: Option<FcGradient>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        GradientSet {
            masks: net.masks.iter().map(|m| vec![0.0; m.heights.len()]).collect(),
            fc: net.fc.as_ref().map(|fc| FcGradient { weights: vec![0.0; fc.weights.len()], bias: vec![0.0; fc.bias.len()] }),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.masks.iter_mut().zip(&other.masks) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        if let (Some(a), Some(b)) = (self.fc.as_mut(), other.fc.as_ref()) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.masks.iter_mut().flatten().for_each(|x| *x *= s);
        if let Some(fc) = self.fc.as_mut() {
            fc.weights.iter_mut().chain(fc.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.masks.iter().flatten().all(|x| x.is_finite())
            && self.fc.as_ref().is_none_or(|fc| fc.weights.iter().chain(&fc.bias).all(|x| x.is_finite()))
    }

    fn matches(&self, net: &Network) -> bool {
        self.masks.len() == net.masks.len()
            && self.masks.iter().zip(&net.masks).all(|(g, m)| g.len() == m.heights.len())
            && match (&self.fc, &net.fc) {
                (None, None) => true,
                (Some(g), Some(w)) => g.weights.len() == w.weights.len() && g.bias.len() == w.bias.len(),
                _ => false,
            }
    }
}

/// Pulls a detector-plane intensity cotangent back through one channel,
/// accumulating height gradients into `masks`.
pub fn backward_channel(
    snap: &Snapshot<'_>,
    channel: usize,
    trace: &crate::network::ChannelTrace,
    intensity_cotangent: &[f64],
    masks: &mut [Vec<f64>],
) {
    let optics = &snap.sim.channels[channel];
    let prop = &optics.propagator;
    let kappa = optics.phase_per_height;
    let mut g: Vec<Complex> = trace.output.iter().zip(intensity_cotangent).map(|(c, &gi)| c * (2.0 * gi)).collect();
    for layer in (0..trace.leaving.len()).rev() {
        prop.adjoint_in_place(&mut g);
        let leaving = &trace.leaving[layer];
        for ((acc, gs), a) in masks[layer].iter_mut().zip(&g).zip(leaving) {
            *acc += kappa * (gs * a.conj()).im;
        }
        let ph = snap.phasor(channel, layer);
        g.iter_mut().zip(ph.iter()).for_each(|(gs, p)| *gs *= p.conj());
    }
}

/// Reverse-mode pass from logit cotangents to all parameters.
pub fn backward_from_logits(trace: &ForwardTrace, logit_cotangent: &[f64; NUM_CLASSES], snap: &Snapshot<'_>) -> Result<GradientSet> {
    let net = snap.net;
    let cfg = &snap.sim.config;
    if trace.channels.len() != trace.active.len() || trace.intensities.len() != trace.active.len() {
        return Err(Error::Config("forward trace was not recorded in training mode".into()));
    }
    if trace.channels.iter().any(|c| c.leaving.len() != cfg.layers) {
        return Err(Error::Config("forward trace does not match the network depth".into()));
    }
    let grid = cfg.grid;
    let mut grads = GradientSet::zeros_like(net);
    let mut map_cotangent = vec![0.0; grid.len()];

    match cfg.head {
        Head::Sum | Head::Maxout => {
            let e = &trace.scores.energies;
            let total: f64 = e.iter().sum();
            if total > 0.0 {
                let weighted: f64 = logit_cotangent.iter().zip(e).map(|(g, e)| g * e).sum::<f64>() / total;
                for (c, r) in cfg.detector.regions.iter().enumerate() {
                    let ge = cfg.logit_scale / total * (logit_cotangent[c] - weighted);
                    for y in r.y0..r.y1 {
                        map_cotangent[y * grid.nx + r.x0..y * grid.nx + r.x1].iter_mut().for_each(|v| *v = ge);
                    }
                }
            }
        }
        Head::MaxoutFc => {
            let fc = net.fc.as_ref().ok_or_else(|| Error::Config("missing FC weights".into()))?;
            let features = trace.features.as_ref().ok_or_else(|| Error::Config("trace lacks FC features".into()))?;
            let fg = grads.fc.as_mut().unwrap();
            let mut feature_cotangent = vec![0.0; fc.inputs];
            for (o, &go) in logit_cotangent.iter().enumerate() {
                fg.bias[o] = go;
                let row = &fc.weights[o * fc.inputs..(o + 1) * fc.inputs];
                for i in 0..fc.inputs {
                    fg.weights[o * fc.inputs + i] = go * features[i];
                    feature_cotangent[i] += go * row[i];
                }
            }
            let pool = PoolLayout::new(grid);
            for y in 0..grid.ny {
                for x in 0..grid.nx {
                    if let Some(k) = pool.cell(x, y) {
                        map_cotangent[y * grid.nx + x] = feature_cotangent[k] * pool.weight;
                    }
                }
            }
        }
    }

    let mut routed = vec![0.0; grid.len()];
    for (pos, (&ch, ctrace)) in trace.active.iter().zip(&trace.channels).enumerate() {
        let cot: &[f64] = match &trace.argmax {
            None => &map_cotangent,
            Some(winner) => {
                for ((r, &m), &w) in routed.iter_mut().zip(&map_cotangent).zip(winner) {
                    *r = if w == pos { m } else { 0.0 };
                }
                &routed
            }
        };
        backward_channel(snap, ch, ctrace, cot, &mut grads.masks);
    }
    Ok(grads)
}

/// Gradient of the loss for one recorded forward pass.
pub fn backward(trace: &ForwardTrace, label: usize, kind: LossKind, snap: &Snapshot<'_>) -> Result<GradientSet> {
    let g = loss_logit_gradient(&trace.scores, label, kind)?;
    backward_from_logits(trace, &g, snap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Ordered gradient reduction (bit-reproducible for any worker count).
    pub deterministic: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 32,
            learning_rate: 0.01,
            lr_decay: 0.5,
            decay_every: 5,
            epochs: 20,
            momentum: 0.9,
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 0,
            deterministic: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return config_err("batch_size, epochs and decay_every must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return config_err("learning_rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return config_err("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Parameters plus optimizer bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    /// Momentum buffers.
    pub velocity: GradientSet,
    pub momentum: f64,
    pub epoch: usize,
    pub steps: usize,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(network: Network, momentum: f64, seed: u64) -> Self {
        let velocity = GradientSet::zeros_like(&network);
        TrainState { network, velocity, momentum, epoch: 0, steps: 0, seed, history: Vec::new() }
    }
}

/// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − lr·v`, heights clamped to
/// `[0, max_height]`, FC weights unconstrained.
pub fn sgd_step(state: &mut TrainState, grads: &GradientSet, lr: f64) -> Result<()> {
    if !grads.matches(&state.network) {
        return config_err("gradient shapes do not match the parameters");
    }
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.steps)));
    }
    let mu = state.momentum;
    for ((mask, v), g) in state.network.masks.iter_mut().zip(state.velocity.masks.iter_mut()).zip(&grads.masks) {
        for ((h, vi), gi) in mask.heights.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi;
            *h -= lr * *vi;
        }
        mask.clamp();
    }
    if let (Some(fc), Some(v), Some(g)) = (state.network.fc.as_mut(), state.velocity.fc.as_mut(), grads.fc.as_ref()) {
        for ((w, vi), gi) in fc.weights.iter_mut().chain(fc.bias.iter_mut()).zip(v.weights.iter_mut().chain(v.bias.iter_mut())).zip(g.weights.iter().chain(&g.bias)) {
            *vi = mu * *vi + gi;
            *w -= lr * *vi;
        }
    }
    state.steps += 1;
    Ok(())
}

/// Mean loss and mean gradient over a batch of `(pattern, label)` items.
pub fn batch_gradient(
    snap: &Snapshot<'_>,
    items: &[(Vec<Complex>, usize)],
    kind: LossKind,
    deterministic: bool,
) -> Result<(f64, GradientSet)> {
    if items.is_empty() {
        return config_err("empty batch");
    }
    let one = |(pattern, label): &(Vec<Complex>, usize)| -> Result<(f64, GradientSet)> {
        let trace = snap.forward(pattern, true)?;
        let l = loss(&trace.scores, *label, kind)?;
        let g = backward(&trace, *label, kind, snap)?;
        Ok((l, g))
    };
    let zero = || (0.0, GradientSet::zeros_like(snap.net));
    let merge = |mut a: (f64, GradientSet), b: (f64, GradientSet)| {
        a.0 += b.0;
        a.1.add_assign(&b.1);
        a
    };
    let (total, mut grads) = if deterministic {
        let parts = items.par_iter().map(one).collect::<Result<Vec<_>>>()?;
        parts.into_iter().fold(zero(), merge)
    } else {
        items
            .par_iter()
            .map(one)
            .try_fold(zero, |acc, r| r.map(|x| merge(acc, x)))
            .try_reduce(zero, |a, b| Ok(merge(a, b)))?
    };
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Accuracy and confusion counts (`confusion[truth][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub count: usize,
    pub correct: usize,
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn precision(&self, class: usize) -> f64 {
        let predicted: u64 = (0..NUM_CLASSES).map(|t| self.confusion[t][class]).sum();
        if predicted == 0 {
            0.0
        } else {
            self.confusion[class][class] as f64 / predicted as f64
        }
    }

    pub fn recall(&self, class: usize) -> f64 {
        let actual: u64 = self.confusion[class].iter().sum();
        if actual == 0 {
            0.0
        } else {
            self.confusion[class][class] as f64 / actual as f64
        }
    }
}

/// Evaluates the channels in `active` on labeled images.
pub fn evaluate_channels(snap: &Snapshot<'_>, images: &[LabeledImage], active: &[usize]) -> Result<Evaluation> {
    let grid = snap.sim.config.grid;
    let preds = images
        .par_iter()
        .map(|img| {
            let pattern = encode_pattern(img, grid)?;
            Ok(snap.forward_subset(&pattern, active, false)?.scores.predicted())
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut correct = 0;
    for (img, &p) in images.iter().zip(&preds) {
        confusion[img.label as usize][p] += 1;
        correct += usize::from(img.label as usize == p);
    }
    Ok(Evaluation { count: images.len(), correct, confusion })
}

pub fn evaluate(net: &Network, images: &[LabeledImage]) -> Result<Evaluation> {
    let sim = Simulator::new(&net.config)?;
    let snap = sim.snapshot(net)?;
    let all: Vec<usize> = (0..sim.channels.len()).collect();
    evaluate_channels(&snap, images, &all)
}

/// Per-channel (base learner) accuracies next to the ensemble accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearnerReport {
    pub wavelengths: Vec<f64>,
    pub base: Vec<Evaluation>,
    pub ensemble: Evaluation,
}

impl BaseLearnerReport {
    pub fn mean_base_accuracy(&self) -> f64 {
        self.base.iter().map(Evaluation::accuracy).sum::<f64>() / self.base.len() as f64
    }

    /// Ensemble accuracy minus the mean base-learner accuracy.
    pub fn ensemble_gain(&self) -> f64 {
        self.ensemble.accuracy() - self.mean_base_accuracy()
    }
}

pub fn base_learner_report(net: &Network, images: &[LabeledImage]) -> Result<BaseLearnerReport> {
    let sim = Simulator::new(&net.config)?;
    let snap = sim.snapshot(net)?;
    let base = (0..sim.channels.len())
        .map(|c| evaluate_channels(&snap, images, &[c]))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..sim.channels.len()).collect();
    let ensemble = if all.len() == 1 { base[0].clone() } else { evaluate_channels(&snap, images, &all)? };
    Ok(BaseLearnerReport { wavelengths: net.config.channels.wavelengths().to_vec(), base, ensemble })
}

/// Result of [`train`]: the best-validation network and the final state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network,
    pub best_val_acc: f64,
    pub state: TrainState,
}

/// Holds the transfer functions for a fixed geometry while parameters change.
pub struct Trainer {
    sim: Simulator,
    pub state: TrainState,
    pub hyper: Hyperparams,
}

impl Trainer {
    pub fn new(network: Network, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        network.validate()?;
        let sim = Simulator::new(&network.config)?;
        let state = TrainState::new(network, hyper.momentum, hyper.seed);
        Ok(Trainer { sim, state, hyper })
    }

    /// Fresh random parameters from `hyper.seed`.
    pub fn from_config(config: NetworkConfig, hyper: Hyperparams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let net = Network::init(config, &mut rng)?;
        Self::new(net, hyper)
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    /// One SGD step on pre-encoded patterns; returns the batch-mean loss.
    pub fn step_patterns(&mut self, items: &[(Vec<Complex>, usize)], lr: f64) -> Result<f64> {
        let (l, g) = {
            let snap = self.sim.snapshot(&self.state.network)?;
            batch_gradient(&snap, items, self.hyper.loss, self.hyper.deterministic)?
        };
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.state.epoch, batch: self.state.steps });
        }
        sgd_step(&mut self.state, &g, lr)?;
        Ok(l)
    }

    pub fn step_images(&mut self, images: &[&LabeledImage], lr: f64) -> Result<f64> {
        let grid = self.sim.config.grid;
        let items = images
            .iter()
            .map(|img| Ok((encode_pattern(img, grid)?, img.label as usize)))
            .collect::<Result<Vec<_>>>()?;
        self.step_patterns(&items, lr)
    }

    /// Mean loss over a set of images at the current parameters.
    pub fn mean_loss(&self, images: &[LabeledImage]) -> Result<f64> {
        let snap = self.sim.snapshot(&self.state.network)?;
        let grid = self.sim.config.grid;
        let losses = images
            .par_iter()
            .map(|img| {
                let t = snap.forward(&encode_pattern(img, grid)?, false)?;
                loss(&t.scores, img.label as usize, self.hyper.loss)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn validation_accuracy(&self, images: &[LabeledImage]) -> Result<f64> {
        let snap = self.sim.snapshot(&self.state.network)?;
        let all: Vec<usize> = (0..self.sim.channels.len()).collect();
        Ok(evaluate_channels(&snap, images, &all)?.accuracy())
    }

    /// Mini-batch SGD over seeded shuffles, keeping the parameters with the
    /// best validation accuracy. `observer` sees each epoch's metrics.
    pub fn run(
        &mut self,
        train: &[LabeledImage],
        validation: &[LabeledImage],
        mut observer: impl FnMut(&EpochMetrics, &Network) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.seed ^ 0x5EED_5EED);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, Network)> = None;
        for epoch in self.state.epoch..self.hyper.epochs {
            let started = Instant::now();
            self.state.epoch = epoch;
            let lr = self.hyper.learning_rate_at(epoch);
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for (b, chunk) in order.chunks(self.hyper.batch_size).enumerate() {
                let imgs: Vec<&LabeledImage> = chunk.iter().map(|&i| &train[i]).collect();
                let l = self.step_images(&imgs, lr).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
                loss_sum += l;
                batches += 1;
            }
            let val_acc = if validation.is_empty() { 0.0 } else { self.validation_accuracy(validation)? };
            let metrics = EpochMetrics {
                epoch: epoch + 1,
                train_loss: loss_sum / batches as f64,
                val_acc,
                lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
                best = Some((val_acc, self.state.network.clone()));
            }
            self.state.history.push(metrics.clone());
            self.state.epoch = epoch + 1;
            observer(&metrics, &self.state.network)?;
        }
        let (best_val_acc, best) = best.unwrap_or_else(|| (0.0, self.state.network.clone()));
        Ok(TrainOutcome { best, best_val_acc, state: self.state.clone() })
    }
}

/// Trains a freshly initialized network.
pub fn train(
    config: NetworkConfig,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    hyper: Hyperparams,
) -> Result<TrainOutcome> {
    let overlap = {
        let set: std::collections::HashSet<&LabeledImage> = validation.iter().collect();
        train_set.iter().any(|x| set.contains(x))
    };
    if overlap && !validation.is_empty() {
        return Err(Error::Dataset("train and validation splits overlap".into()));
    }
    Trainer::from_config(config, hyper)?.run(train_set, validation, |_, _| Ok(()))
}
