//! Optimizers and the training procedures: Euclidean, adversarial
//! (alternating G/D), joint encoder/decoder, FC-only fine-tuning, and
//! validation-based selection.
//!
//! All loops are single-threaded and sum per-sample gradients in batch
//! order, so a run is a pure function of (seed, data, config).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{bce_loss, squared_error, LayerParams, Mode, ParamId};
use crate::models::{Discriminator, Encoder, FcInit, GradMask, ReconNet};
use crate::rng::Prng;
use crate::sensing::{sense, MeasurementMatrix};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam(AdamParams),
}

fn check_same(p: &Tensor, other: &Tensor, what: &str) -> Result<()> {
    if p.shape() != other.shape() {
        return Err(Error::shape(format!(
            "{what} shape {:?} differs from parameter {:?}",
            other.shape(),
            p.shape()
        )));
    }
    Ok(())
}

/// `v ← μ·v − lr·g; p ← p + v`.
pub fn sgd_step(p: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f64, momentum: f64) -> Result<()> {
    check_same(p, g, "gradient")?;
    check_same(p, v, "velocity")?;
    for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vi = momentum * *vi - lr * gi;
        *pi += *vi;
    }
    Ok(())
}

/// One bias-corrected Adam update; `t` is the 1-based step number.
pub fn adam_step(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    check_same(p, g, "gradient")?;
    check_same(p, m, "first moment")?;
    check_same(p, v, "second moment")?;
    if t == 0 {
        return Err(Error::invalid("Adam step numbers start at 1"));
    }
    let c1 = 1.0 - hp.beta1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - hp.beta2.powi(t.min(i32::MAX as u64) as i32);
    for (((pi, gi), mi), vi) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *pi -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer state for a subset of a parameter store. Parameters outside
/// `trainable` are never written.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    trainable: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &LayerParams, trainable: Vec<ParamId>) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        let zeros = |ids: &[ParamId]| ids.iter().map(|&id| Tensor::zeros(params.value(id).shape())).collect();
        let second = match kind {
            OptimizerKind::Adam(_) => zeros(&trainable),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(Optimizer {
            kind,
            lr,
            step: 0,
            first: zeros(&trainable),
            second,
            trainable,
        })
    }

    /// Optimizer over every parameter in the store.
    pub fn all(kind: OptimizerKind, lr: f64, params: &LayerParams) -> Result<Self> {
        Self::new(kind, lr, params, params.ids().collect())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut LayerParams) -> Result<()> {
        self.step += 1;
        let (values, grads) = params.values_and_grads();
        for (slot, &id) in self.trainable.iter().enumerate() {
            let (p, g) = (&mut values[id.index()], &grads[id.index()]);
            match self.kind {
                OptimizerKind::Sgd { momentum } => sgd_step(p, g, &mut self.first[slot], self.lr, momentum)?,
                OptimizerKind::Adam(hp) => adam_step(
                    p,
                    g,
                    &mut self.first[slot],
                    &mut self.second[slot],
                    self.step,
                    self.lr,
                    hp,
                )?,
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration and data

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub validation_fraction: f64,
}

/// SGD step size for the summed (not pixel-averaged) Euclidean loss; larger
/// steps drive the final ReLU into a dead state within a few hundred updates.
pub const DEFAULT_SGD_LR: f64 = 1e-6;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            iterations: 1000,
            learning_rate: DEFAULT_SGD_LR,
            optimizer: OptimizerKind::Sgd {
                momentum: DEFAULT_MOMENTUM,
            },
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub g_steps_per_d: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lambda_rec: 1.0,
            lambda_adv: 1e-4,
            lr_g: 1e-3,
            lr_d: 1e-5,
            g_steps_per_d: 2,
            iterations: 100_000,
            batch_size: 128,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if self.g_steps_per_d == 0 {
            return Err(Error::invalid("g_steps_per_d must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::invalid("learning rates must be >= 0"));
        }
        Ok(())
    }
}

/// Network inputs paired with target blocks.
#[derive(Clone, Debug, Default)]
pub struct TrainPairs {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainPairs {
    /// `(Φx, x)` for every block.
    pub fn measure(phi: &MeasurementMatrix, blocks: &[Vec<f64>]) -> Result<Self> {
        Ok(TrainPairs {
            inputs: blocks.iter().map(|x| sense(phi, x)).collect::<Result<_>>()?,
            targets: blocks.to_vec(),
        })
    }

    /// `(x, x)` for every block, as used by the autoencoder.
    pub fn identity(blocks: &[Vec<f64>]) -> Self {
        TrainPairs {
            inputs: blocks.to_vec(),
            targets: blocks.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Draws mini-batches from a permutation reshuffled at every epoch. A
/// batch never straddles epochs; the leftover tail of a permutation is
/// dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Prng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, rng: Prng) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot sample batches from an empty dataset"));
        }
        if batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let mut s = BatchSampler {
            order: (0..len).collect(),
            pos: 0,
            batch: batch.min(len),
            rng,
        };
        s.rng.shuffle(&mut s.order);
        Ok(s)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

fn check_pairs(model: &ReconNet, data: &TrainPairs) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.inputs.len() != data.targets.len() {
        return Err(Error::shape("inputs and targets differ in count"));
    }
    if let Some(bad) = data.inputs.iter().position(|y| y.len() != model.m()) {
        return Err(Error::shape(format!(
            "sample {bad} has {} measurements, model expects {}",
            data.inputs[bad].len(),
            model.m()
        )));
    }
    Ok(())
}

fn check_finite(iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iteration, loss })
    }
}

/// Zeroes `model`'s gradients and accumulates the Euclidean loss gradient
/// of `weight·(1/B)·Σ‖f(y_i) − x_i‖²` over `batch`. Returns the unweighted
/// mean loss.
pub fn euclidean_gradients(
    model: &mut ReconNet,
    data: &TrainPairs,
    batch: &[usize],
    mask: GradMask,
    weight: f64,
) -> Result<f64> {
    model.params_mut().zero_grads();
    let scale = weight / batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; data.targets[0].len()];
    for &i in batch {
        let trace = model.forward_trace(&data.inputs[i])?;
        total += squared_error(trace.output(), &data.targets[i], scale, &mut grad);
        model.backward(&trace, &grad, mask, false);
    }
    Ok(total / batch.len() as f64)
}

/// Mean per-sample Euclidean loss `(1/T)·Σ‖f(y_i) − x_i‖²`.
pub fn mean_loss(model: &ReconNet, data: &TrainPairs) -> Result<f64> {
    check_pairs(model, data)?;
    let mut total = 0.0;
    for (y, x) in data.inputs.iter().zip(&data.targets) {
        let out = model.forward(y)?;
        total += out.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

fn run_euclidean(
    model: &mut ReconNet,
    data: &TrainPairs,
    cfg: &TrainConfig,
    mask: GradMask,
    trainable: Vec<ParamId>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_pairs(model, data)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params(), trainable)?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, Prng::with_stream(cfg.seed, 1))?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = sampler.next_batch().to_vec();
        let loss = euclidean_gradients(model, data, &batch, mask, 1.0)?;
        check_finite(it, loss)?;
        opt.step(model.params_mut())?;
        if !model.params().all_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        history.push(loss);
        if (it + 1) % 1000 == 0 {
            log::debug!("iteration {} loss {loss:.6}", it + 1);
        }
    }
    Ok(history)
}

/// Trains every parameter of `model` on `(Φx, x)` pairs. Returns the batch
/// loss observed before each update.
pub fn train_euclidean(model: &mut ReconNet, data: &TrainPairs, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let ids = model.params().ids().collect();
    run_euclidean(model, data, cfg, GradMask::ALL, ids)
}

/// Replaces the FC first stage of `base` with a randomly initialized one
/// sized for `new_phi` and trains only that layer on `(new Φ x, x)`.
/// Convolution tensors are copied from `base` and never written.
pub fn finetune_fc(
    base: &ReconNet,
    new_phi: &MeasurementMatrix,
    blocks: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(ReconNet, Vec<f64>)> {
    let mut init_rng = Prng::with_stream(cfg.seed, 2);
    let mut model = base.with_new_fc(
        new_phi.mr,
        new_phi.m(),
        FcInit::default_gaussian(new_phi.m()),
        &mut init_rng,
    )?;
    let data = TrainPairs::measure(new_phi, blocks)?;
    let ids = model.first_stage_ids();
    let history = run_euclidean(&mut model, &data, cfg, GradMask::FIRST_STAGE_ONLY, ids)?;
    Ok((model, history))
}

/// Default budget of [`finetune_fc`].
pub const FINETUNE_ITERATIONS: usize = 1000;

/// Index of the candidate with the lowest mean validation loss; ties go
/// to the earliest.
pub fn select_by_validation(models: &[ReconNet], val: &TrainPairs) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::invalid("no candidate models"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, m) in models.iter().enumerate() {
        let loss = mean_loss(m, val)?;
        if loss < best.1 {
            best = (i, loss);
        }
    }
    Ok(best.0)
}

/// Learning rates tried by [`search_learning_rate`].
pub const LR_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Trains a copy of `model` at each rate of `grid` and keeps the one with
/// the lowest validation loss. Diverged runs drop out. Returns the chosen
/// model, its rate and its loss history.
pub fn search_learning_rate(
    model: &ReconNet,
    train: &TrainPairs,
    val: &TrainPairs,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(ReconNet, f64, Vec<f64>)> {
    let mut candidates = Vec::new();
    for &lr in grid {
        let mut m = model.clone();
        let run_cfg = TrainConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        match train_euclidean(&mut m, train, &run_cfg) {
            Ok(h) => candidates.push((m, lr, h)),
            Err(Error::Divergence { iteration, loss }) => {
                log::info!("lr {lr} diverged at iteration {iteration} (loss {loss})");
            }
            Err(e) => return Err(e),
        }
    }
    if candidates.is_empty() {
        return Err(Error::Divergence {
            iteration: cfg.iterations,
            loss: f64::NAN,
        });
    }
    let models: Vec<ReconNet> = candidates.iter().map(|c| c.0.clone()).collect();
    let pick = select_by_validation(&models, val)?;
    Ok(candidates.swap_remove(pick))
}

// ---------------------------------------------------------------------------
// Adversarial training

/// Per-update records of an adversarial run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    /// Total generator loss per G update.
    pub g_loss: Vec<f64>,
    /// Adversarial term BCE(D(G(y)), 1) per G update.
    pub g_adv: Vec<f64>,
    /// BCE(D(x), 1) + BCE(D(G(y)), 0) per D update.
    pub d_loss: Vec<f64>,
    /// Mean D output on real blocks at each D update.
    pub d_real: Vec<f64>,
    /// Mean D output on generated blocks at each D update.
    pub d_fake: Vec<f64>,
    pub g_updates: usize,
    pub d_updates: usize,
}

/// Measurements of sample `i`: the stored input, or the encoder applied to it.
fn measure(enc: Option<&Encoder>, data: &TrainPairs, i: usize) -> Result<Vec<f64>> {
    match enc {
        Some(e) => e.forward(&data.inputs[i]),
        None => Ok(data.inputs[i].clone()),
    }
}

/// Accumulates generator gradients of
/// `λ_rec·(1/B)Σ‖G(y) − x‖² + λ_adv·(1/B)Σ BCE(D(G(y)), 1)` into `g` (and
/// into `enc`, which then produces y from the stored blocks). With
/// `λ_adv = 0` the discriminator is not evaluated and, without an encoder,
/// the gradients equal [`euclidean_gradients`] bitwise. Returns (total,
/// adversarial term).
pub fn generator_gradients(
    g: &mut ReconNet,
    d: &mut Discriminator,
    mut enc: Option<&mut Encoder>,
    data: &TrainPairs,
    batch: &[usize],
    cfg: &GanConfig,
    rng: &mut Prng,
) -> Result<(f64, f64)> {
    g.params_mut().zero_grads();
    if let Some(e) = enc.as_deref_mut() {
        e.params_mut().zero_grads();
    }
    let bsz = batch.len() as f64;
    let scale = cfg.lambda_rec / bsz;
    let (mut rec, mut adv) = (0.0, 0.0);
    let mut grad = vec![0.0; data.targets[0].len()];
    for &i in batch {
        let y = measure(enc.as_deref(), data, i)?;
        let trace = g.forward_trace(&y)?;
        rec += squared_error(trace.output(), &data.targets[i], scale, &mut grad);
        if cfg.lambda_adv != 0.0 {
            let dt = d.forward_trace(trace.output(), Mode::Train, rng)?;
            let bce = bce_loss(dt.prob, true);
            adv += bce.value;
            let g_in = d.backward(&dt, cfg.lambda_adv / bsz * bce.grad.data()[0], false)?;
            grad.iter_mut().zip(&g_in).for_each(|(a, b)| *a += b);
        }
        let gy = g.backward(&trace, &grad, GradMask::ALL, enc.is_some());
        if let (Some(e), Some(gy)) = (enc.as_deref_mut(), gy) {
            e.backward(&data.inputs[i], &gy);
        }
    }
    let (rec, adv) = (rec / bsz, adv / bsz);
    Ok((cfg.lambda_rec * rec + cfg.lambda_adv * adv, adv))
}

/// Accumulates discriminator gradients of
/// `(1/B)Σ [BCE(D(x), 1) + BCE(D(G(y)), 0)]`. Returns (loss, mean real
/// probability, mean fake probability).
pub fn discriminator_gradients(
    g: &ReconNet,
    d: &mut Discriminator,
    enc: Option<&Encoder>,
    data: &TrainPairs,
    batch: &[usize],
    rng: &mut Prng,
) -> Result<(f64, f64, f64)> {
    d.params_mut().zero_grads();
    let bsz = batch.len() as f64;
    let (mut loss, mut real_p, mut fake_p) = (0.0, 0.0, 0.0);
    for &i in batch {
        let fake = g.forward(&measure(enc, data, i)?)?;
        for (block, label) in [(&data.targets[i], true), (&fake, false)] {
            let t = d.forward_trace(block, Mode::Train, rng)?;
            let bce = bce_loss(t.prob, label);
            loss += bce.value;
            if label {
                real_p += t.prob;
            } else {
                fake_p += t.prob;
            }
            d.backward(&t, bce.grad.data()[0] / bsz, true)?;
        }
    }
    Ok((loss / bsz, real_p / bsz, fake_p / bsz))
}

/// Mean inference-mode D output on real and generated blocks of `data`.
pub fn discriminator_probabilities(
    g: &ReconNet,
    d: &Discriminator,
    enc: Option<&Encoder>,
    data: &TrainPairs,
) -> Result<(f64, f64)> {
    let mut rng = Prng::new(0);
    let (mut real, mut fake) = (0.0, 0.0);
    for i in 0..data.len() {
        real += d.forward(&data.targets[i], Mode::Infer, &mut rng)?;
        fake += d.forward(&g.forward(&measure(enc, data, i)?)?, Mode::Infer, &mut rng)?;
    }
    let n = data.len() as f64;
    Ok((real / n, fake / n))
}

const SATURATION_EPS: f64 = 1e-3;

/// Alternating training: per iteration, `g_steps_per_d` Adam updates of G
/// followed by one Adam update of D, each on a fresh batch.
pub fn train_adversarial(
    g: &mut ReconNet,
    d: &mut Discriminator,
    data: &TrainPairs,
    cfg: &GanConfig,
) -> Result<GanHistory> {
    check_pairs(g, data)?;
    run_adversarial(g, d, None, data, cfg)
}

/// [`train_adversarial`] with a learnable encoder in front of G, trained
/// with G at rate `lr_g`. Returns the exported learned Φ and the history.
pub fn train_adversarial_autoencoder(
    encoder: &mut Encoder,
    g: &mut ReconNet,
    d: &mut Discriminator,
    blocks: &[Vec<f64>],
    cfg: &GanConfig,
) -> Result<(MeasurementMatrix, GanHistory)> {
    check_encoder(encoder, g, blocks)?;
    let data = TrainPairs::identity(blocks);
    let hist = run_adversarial(g, d, Some(encoder), &data, cfg)?;
    Ok((export_learned(encoder, g)?, hist))
}

fn run_adversarial(
    g: &mut ReconNet,
    d: &mut Discriminator,
    mut enc: Option<&mut Encoder>,
    data: &TrainPairs,
    cfg: &GanConfig,
) -> Result<GanHistory> {
    cfg.validate()?;
    let kind = OptimizerKind::Adam(cfg.adam);
    let mut opt_g = Optimizer::all(kind, cfg.lr_g, g.params())?;
    let mut opt_d = Optimizer::all(kind, cfg.lr_d, d.params())?;
    let mut opt_e = match enc.as_deref() {
        Some(e) => Some(Optimizer::all(kind, cfg.lr_g, e.params())?),
        None => None,
    };
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, Prng::with_stream(cfg.seed, 1))?;
    let mut dropout_rng = Prng::with_stream(cfg.seed, 3);
    let mut hist = GanHistory::default();
    let mut saturated_samples = 0usize;
    let mut warned = false;
    for it in 0..cfg.iterations {
        for _ in 0..cfg.g_steps_per_d {
            let batch = sampler.next_batch().to_vec();
            let (loss, adv) = generator_gradients(g, d, enc.as_deref_mut(), data, &batch, cfg, &mut dropout_rng)?;
            check_finite(it, loss)?;
            opt_g.step(g.params_mut())?;
            if let (Some(o), Some(e)) = (opt_e.as_mut(), enc.as_deref_mut()) {
                o.step(e.params_mut())?;
            }
            hist.g_loss.push(loss);
            hist.g_adv.push(adv);
            hist.g_updates += 1;
        }
        let batch = sampler.next_batch().to_vec();
        let (loss, real, fake) = discriminator_gradients(g, d, enc.as_deref(), data, &batch, &mut dropout_rng)?;
        check_finite(it, loss)?;
        opt_d.step(d.params_mut())?;
        let enc_ok = enc.as_deref().is_none_or(|e| e.params().all_finite());
        if !g.params().all_finite() || !d.params().all_finite() || !enc_ok {
            return Err(Error::Divergence { iteration: it, loss });
        }
        hist.d_loss.push(loss);
        hist.d_real.push(real);
        hist.d_fake.push(fake);
        hist.d_updates += 1;
        let saturated = [real, fake]
            .iter()
            .all(|p| !(SATURATION_EPS..=1.0 - SATURATION_EPS).contains(p));
        saturated_samples = if saturated { saturated_samples + batch.len() } else { 0 };
        if saturated_samples >= data.len() && !warned {
            log::warn!("discriminator saturated for a full epoch at iteration {it}");
            warned = true;
        }
    }
    Ok(hist)
}

// ---------------------------------------------------------------------------
// Joint measurement learning

/// Trains `encoder` and `decoder` end to end on `(x, x)`; the decoder sees
/// the encoder output as its measurements. Returns the exported learned Φ
/// and the loss history.
pub fn train_autoencoder(
    encoder: &mut Encoder,
    decoder: &mut ReconNet,
    blocks: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(MeasurementMatrix, Vec<f64>)> {
    cfg.validate()?;
    check_encoder(encoder, decoder, blocks)?;
    let mut opt_e = Optimizer::all(cfg.optimizer, cfg.learning_rate, encoder.params())?;
    let mut opt_g = Optimizer::all(cfg.optimizer, cfg.learning_rate, decoder.params())?;
    let mut sampler = BatchSampler::new(blocks.len(), cfg.batch_size, Prng::with_stream(cfg.seed, 1))?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut grad = vec![0.0; blocks[0].len()];
    for it in 0..cfg.iterations {
        let batch = sampler.next_batch().to_vec();
        encoder.params_mut().zero_grads();
        decoder.params_mut().zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in &batch {
            let x = &blocks[i];
            let y = encoder.forward(x)?;
            let trace = decoder.forward_trace(&y)?;
            total += squared_error(trace.output(), x, scale, &mut grad);
            let gy = decoder
                .backward(&trace, &grad, GradMask::ALL, true)
                .expect("input gradient requested");
            encoder.backward(x, &gy);
        }
        let loss = total / batch.len() as f64;
        check_finite(it, loss)?;
        opt_e.step(encoder.params_mut())?;
        opt_g.step(decoder.params_mut())?;
        if !encoder.params().all_finite() || !decoder.params().all_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        history.push(loss);
    }
    Ok((export_learned(encoder, decoder)?, history))
}

fn check_encoder(encoder: &Encoder, decoder: &ReconNet, blocks: &[Vec<f64>]) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if encoder.m() != decoder.m() {
        return Err(Error::shape(format!(
            "encoder emits {} measurements, decoder expects {}",
            encoder.m(),
            decoder.m()
        )));
    }
    Ok(())
}

/// The encoder weight as Φ, tagged with the decoder's measurement rate.
fn export_learned(encoder: &Encoder, decoder: &ReconNet) -> Result<MeasurementMatrix> {
    encoder.export(decoder.spec().mr)
}

// ---------------------------------------------------------------------------
// Loss history files

pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

/// One row per outer iteration: mean G loss over its G updates, D loss and
/// mean adversarial term.
pub fn gan_csv(h: &GanHistory) -> String {
    let mut s = String::from("iteration,loss,d_loss,g_adv_loss\n");
    let per = h.g_updates.checked_div(h.d_updates).unwrap_or(0);
    for i in 0..h.d_updates {
        let g = &h.g_loss[i * per..(i + 1) * per];
        let a = &h.g_adv[i * per..(i + 1) * per];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let _ = writeln!(s, "{},{},{},{}", i + 1, mean(g), h.d_loss[i], mean(a));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
