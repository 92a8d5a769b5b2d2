//! One-shot joint training of every candidate precision over shared weights.
//!
//! Two loops are provided. The conventional loop accumulates the gradients
//! of all precisions and takes a single optimizer step per batch. The ALRS
//! loop steps after every precision pass, with a weight optimizer at the
//! scheduled rate and a scale optimizer at a per-precision rate `λ_b`.

use std::collections::BTreeMap;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, Adam, AdamConfig, Gradients, Layer, Network, NormKey, ParamId, QuantCtx, Slot};
use crate::quantizer::{signed_range, unsigned_range, BitWidthSet};
use crate::report::{MetricsRecord, RunLog, ScaleGradRecord};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Conventional,
    Alrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitOrder {
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bit_set: BitWidthSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub mode: TrainMode,
    /// Lower bound applied to `λ_b`.
    pub alrs_floor: f32,
    pub shared_weight_scale: bool,
    pub bit_order: BitOrder,
    /// Multiply scale gradients by LSQ's `1/sqrt(N · Q_p)` before use.
    pub lsq_grad_scale: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 64, 30 epochs.
    pub fn desk(bit_set: BitWidthSet, mode: TrainMode) -> Self {
        Self {
            bit_set,
            epochs: 30,
            batch_size: 64,
            base_lr: 5e-3,
            weight_decay: 5e-5,
            mode,
            alrs_floor: 0.0,
            shared_weight_scale: true,
            bit_order: BitOrder::Descending,
            lsq_grad_scale: true,
            seed: 0,
        }
    }

    /// ImageNet hyperparameters (batch 256, 90 epochs, lr 5e-4, wd 5e-5).
    pub fn imagenet_preset(bit_set: BitWidthSet, mode: TrainMode) -> Self {
        Self {
            epochs: 90,
            batch_size: 256,
            base_lr: 5e-4,
            ..Self::desk(bit_set, mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.weight_decay < 0.0 || self.alrs_floor < 0.0 {
            return Err(Error::Config("weight decay and alrs_floor must be non-negative".into()));
        }
        Ok(())
    }

    /// Bit-widths in the order the training loop visits them.
    pub fn pass_order(&self) -> Vec<u8> {
        let mut bits = self.bit_set.bits().to_vec();
        if self.bit_order == BitOrder::Ascending {
            bits.reverse();
        }
        bits
    }
}

/// Per-precision scaling factor: `10^(-Δ/2)` for even `Δ = h - b`,
/// `5 · 10^(-(Δ+1)/2)` for odd `Δ`.
pub fn eta(h: u8, b: u8) -> f64 {
    let delta = i32::from(h) - i32::from(b);
    if delta % 2 == 0 {
        10f64.powi(-delta / 2)
    } else {
        5.0 * 10f64.powi(-(delta + 1) / 2)
    }
}

/// Element-wise clamp to `[-c, c]`.
pub fn clip_grad(g: &[f32], c: f32) -> Vec<f32> {
    g.iter().map(|&v| v.clamp(-c, c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlrsRate {
    /// `λ_b` after flooring.
    pub lr: f32,
    /// `λ_b` before flooring.
    pub raw: f32,
}

impl AlrsRate {
    pub fn floored(&self) -> bool {
        self.lr != self.raw
    }
}

/// `λ_b = η_b (λ - (1/L) Σ_i min(max_abs(clip_grad(∇s_b^i, 1)), 1))`,
/// floored at `floor`. `scale_grads` holds one gradient vector per layer.
pub fn alrs_lr(b: u8, lambda: f32, scale_grads: &[Vec<f32>], h: u8, floor: f32) -> AlrsRate {
    let layers = scale_grads.len();
    let penalty = if layers == 0 {
        0.0
    } else {
        scale_grads
            .iter()
            .map(|g| {
                let clipped = clip_grad(g, 1.0);
                let max_abs = clipped.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                f64::from(max_abs.min(1.0))
            })
            .sum::<f64>()
            / layers as f64
    };
    let raw = (eta(h, b) * (f64::from(lambda) - penalty)) as f32;
    AlrsRate {
        lr: raw.max(floor),
        raw,
    }
}

/// Record of one precision pass inside a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    pub bits: u8,
    pub loss: f32,
    /// Learning rate applied to the quantization scales for this pass.
    pub scale_lr: f32,
    /// Max-abs scale gradient per quantized layer, in layer order.
    pub scale_grad_max_abs: Vec<(usize, f32)>,
    /// Absolute change of all scales caused by this pass (ALRS only; the
    /// conventional loop reports the change of its single step on every pass).
    pub scale_update: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub passes: Vec<PassRecord>,
}

pub(crate) fn max_abs_by_layer(grads: &Gradients) -> Vec<(usize, f32)> {
    grads
        .scale_grads_by_layer()
        .into_iter()
        .map(|(l, g)| (l, g.iter().fold(0.0f32, |m, v| m.max(v.abs()))))
        .collect()
}

/// Rescales every scale gradient of a pass at precision `b` by
/// `1/sqrt(N · Q_p)`: `N` is the weight count (weight scales) or the
/// per-sample input size (activation scales), `Q_p` the positive clip bound.
pub fn apply_lsq_grad_scale(net: &Network, grads: &mut Gradients, b: u8) {
    for (li, layer) in net.layers().iter().enumerate() {
        let Layer::Linear(lin) = layer else { continue };
        if !lin.quantized {
            continue;
        }
        let w_key = match &lin.quant {
            Some(q) if q.shared_weight_scale => q.h,
            _ => b,
        };
        let wq_p = f64::from(signed_range(b).1);
        let aq_p = f64::from(unsigned_range(b).1);
        if let Some(g) = grads.get_mut(&ParamId::new(li, Slot::WeightScale(w_key))) {
            let f = (1.0 / (lin.weight.len() as f64 * wq_p).sqrt()) as f32;
            g.iter_mut().for_each(|v| *v *= f);
        }
        if let Some(g) = grads.get_mut(&ParamId::new(li, Slot::ActScale(b))) {
            let f = (1.0 / (lin.input_len() as f64 * aq_p).sqrt()) as f32;
            g.iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Smallest value a quantization scale may take after an optimizer step.
pub const MIN_SCALE: f32 = 1e-6;

/// Clamps every quantization scale to at least [`MIN_SCALE`].
pub fn project_scales(net: &mut Network) {
    let ids: Vec<_> = net.param_ids().into_iter().filter(|id| id.is_scale()).collect();
    for id in ids {
        if let Some(p) = net.param_mut(&id) {
            p.iter_mut().for_each(|s| *s = s.max(MIN_SCALE));
        }
    }
}

fn scale_snapshot(net: &Network) -> Vec<f32> {
    net.param_ids()
        .iter()
        .filter(|id| id.is_scale())
        .flat_map(|id| net.param(id).unwrap_or(&[]).to_vec())
        .collect()
}

fn abs_change(before: &[f32], after: &[f32]) -> f32 {
    before.iter().zip(after).map(|(a, b)| (a - b).abs()).sum()
}

/// Multi-precision training state: one network whose quantized layers share
/// a single master weight tensor, with per-precision activation scales and
/// normalization statistics.
#[derive(Debug, Clone)]
pub struct MultiPrecTrainer {
    net: Network,
    config: TrainConfig,
    weight_opt: Adam,
    scale_opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    floor_hits: u64,
}

impl MultiPrecTrainer {
    /// Attaches quantizers to a copy of `pretrained` (calibrated on `calib`)
    /// and creates one normalization table entry per precision.
    pub fn new(pretrained: &Network, calib: &DenseTensor, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut net = pretrained.clone();
        net.init_quantization(&config.bit_set, calib, config.shared_weight_scale)?;
        let keys: Vec<NormKey> = config.bit_set.iter().map(NormKey::uniform).collect();
        net.reset_norm_keys(&keys);
        Self::from_network(net, config)
    }

    /// Wraps an already-quantized network (e.g. loaded from a checkpoint).
    pub fn from_network(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weight_opt = Adam::new(AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        });
        let scale_opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net,
            config,
            weight_opt,
            scale_opt,
            step: 0,
            floor_hits: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scale_optimizer_config(&self) -> &AdamConfig {
        self.scale_opt.config()
    }

    /// Number of ALRS passes whose rate hit the floor.
    pub fn floor_hits(&self) -> u64 {
        self.floor_hits
    }

    fn quantized_count(&self) -> usize {
        self.net.quantized_layers().len()
    }

    fn ctx(&self, b: u8) -> QuantCtx {
        QuantCtx::uniform(b, self.quantized_count())
    }

    fn pass(&mut self, batch: &Dataset, b: u8) -> Result<Gradients> {
        let ctx = self.ctx(b);
        let (_, cache) = self.net.forward_train(&batch.x, Some(&ctx))?;
        let mut grads = self.net.backward(&cache, &batch.y)?;
        if self.config.lsq_grad_scale {
            apply_lsq_grad_scale(&self.net, &mut grads, b);
        }
        if !grads.loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at {b}-bit, step {}", self.step)));
        }
        Ok(grads)
    }

    /// Runs every precision pass of the conventional loop and returns the
    /// accumulated gradients without stepping. Normalization statistics of
    /// each precision are updated as a side effect.
    pub fn conventional_gradients(&mut self, batch: &Dataset) -> Result<(Gradients, Vec<PassRecord>)> {
        let mut total = Gradients::default();
        let mut passes = Vec::new();
        for b in self.config.pass_order() {
            let g = self.pass(batch, b)?;
            passes.push(PassRecord {
                bits: b,
                loss: g.loss,
                scale_lr: 0.0,
                scale_grad_max_abs: max_abs_by_layer(&g),
                scale_update: 0.0,
            });
            total.add(&g);
        }
        Ok((total, passes))
    }

    /// Applies one step of both optimizers with the given rates.
    pub fn apply(&mut self, grads: &Gradients, weight_lr: f32, scale_lr: f32) -> Result<()> {
        self.weight_opt.step(&mut self.net, grads, weight_lr, |id| !id.is_scale())?;
        self.scale_opt.step(&mut self.net, grads, scale_lr, |id| id.is_scale())?;
        project_scales(&mut self.net);
        Ok(())
    }

    /// Accumulate-then-step iteration.
    pub fn train_step_conventional(&mut self, batch: &Dataset, lr: f32) -> Result<StepRecord> {
        let (total, mut passes) = self.conventional_gradients(batch)?;
        let before = scale_snapshot(&self.net);
        self.apply(&total, lr, lr)?;
        let update = abs_change(&before, &scale_snapshot(&self.net));
        for p in &mut passes {
            p.scale_lr = lr;
            p.scale_update = update;
        }
        self.step += 1;
        Ok(StepRecord { passes })
    }

    /// Per-precision step iteration with ALRS scale learning rates.
    pub fn train_step_alrs(&mut self, batch: &Dataset, lr: f32) -> Result<StepRecord> {
        let h = self.config.bit_set.highest();
        let mut passes = Vec::new();
        for b in self.config.pass_order() {
            let g = self.pass(batch, b)?;
            let per_layer: Vec<Vec<f32>> = g.scale_grads_by_layer().into_values().collect();
            let rate = alrs_lr(b, lr, &per_layer, h, self.config.alrs_floor);
            if rate.floored() {
                self.floor_hits += 1;
                debug!("λ_{b} floored: raw {} -> {}", rate.raw, rate.lr);
            }
            let before = scale_snapshot(&self.net);
            self.apply(&g, lr, rate.lr)?;
            passes.push(PassRecord {
                bits: b,
                loss: g.loss,
                scale_lr: rate.lr,
                scale_grad_max_abs: max_abs_by_layer(&g),
                scale_update: abs_change(&before, &scale_snapshot(&self.net)),
            });
        }
        self.step += 1;
        Ok(StepRecord { passes })
    }

    pub fn train_step(&mut self, batch: &Dataset, lr: f32) -> Result<StepRecord> {
        match self.config.mode {
            TrainMode::Conventional => self.train_step_conventional(batch, lr),
            TrainMode::Alrs => self.train_step_alrs(batch, lr),
        }
    }

    /// Eval-mode accuracy at uniform precision `b`.
    pub fn evaluate(&self, b: u8, data: &Dataset) -> Result<f32> {
        evaluate_network(&self.net, &self.config.bit_set, b, data)
    }

    /// Trains for `config.epochs` with the cosine schedule, evaluating every
    /// precision on `split.eval` after each epoch.
    pub fn fit(&mut self, split: &Split) -> Result<RunLog> {
        let mut log = RunLog::default();
        let order = self.config.pass_order();
        for epoch in 0..self.config.epochs {
            let lr = cosine_lr(self.config.base_lr, epoch, self.config.epochs)?;
            let batches = split.train.batches(self.config.batch_size, &mut self.rng)?;
            let mut loss_sum: BTreeMap<u8, f64> = BTreeMap::new();
            let mut lr_sum: BTreeMap<u8, f64> = BTreeMap::new();
            for batch in &batches {
                let rec = self.train_step(batch, lr)?;
                for p in &rec.passes {
                    *loss_sum.entry(p.bits).or_default() += f64::from(p.loss);
                    *lr_sum.entry(p.bits).or_default() += f64::from(p.scale_lr);
                    for &(layer, max_abs) in &p.scale_grad_max_abs {
                        log.scale_grads.push(ScaleGradRecord {
                            step: self.step - 1,
                            layer,
                            bit: p.bits,
                            max_abs,
                        });
                    }
                }
            }
            let n = batches.len().max(1) as f64;
            for &b in &order {
                log.metrics.push(MetricsRecord {
                    epoch,
                    precision: b.to_string(),
                    loss: (loss_sum.get(&b).copied().unwrap_or(0.0) / n) as f32,
                    accuracy: self.evaluate(b, &split.eval)?,
                    lr_scale: (lr_sum.get(&b).copied().unwrap_or(0.0) / n) as f32,
                });
            }
        }
        Ok(log)
    }
}

/// Eval-mode accuracy of a quantized network at uniform precision `b`.
pub fn evaluate_network(net: &Network, set: &BitWidthSet, b: u8, data: &Dataset) -> Result<f32> {
    set.check(b)?;
    let ctx = QuantCtx::uniform(b, net.quantized_layers().len());
    let pred = net.predict(&data.x, Some(&ctx))?;
    Ok(accuracy(&pred, &data.y))
}

/// Full-precision training used to produce the pretrained starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for FloatTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 5e-3,
            weight_decay: 5e-5,
            seed: 0,
        }
    }
}

/// Trains `net` in full precision with Adam and the cosine schedule.
pub fn train_float(net: &mut Network, train: &Dataset, cfg: &FloatTrainConfig) -> Result<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs)?;
        let mut sum = 0.0f64;
        let batches = train.batches(cfg.batch_size, &mut rng)?;
        for batch in &batches {
            let (_, cache) = net.forward_train(&batch.x, None)?;
            let g = net.backward(&cache, &batch.y)?;
            sum += f64::from(g.loss);
            opt.step(net, &g, lr, |id| !id.is_scale())?;
        }
        losses.push((sum / batches.len().max(1) as f64) as f32);
    }
    Ok(losses)
}

/// Full-precision eval accuracy.
pub fn evaluate_float(net: &Network, data: &Dataset) -> Result<f32> {
    Ok(accuracy(&net.predict(&data.x, None)?, &data.y))
}
