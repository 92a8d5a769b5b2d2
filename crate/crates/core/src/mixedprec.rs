//! One-shot mixed-precision SuperNet training with Hessian-aware stochastic
//! bit-switching and transitional normalization statistics.

use std::collections::BTreeMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, Adam, AdamConfig, Network, NormKey, QuantCtx};
use crate::quantizer::BitWidthSet;
use crate::report::{BitHistogramRecord, MetricsRecord, RunLog};
use crate::sensitivity::SensitivityProfile;
use crate::trainer::{alrs_lr, apply_lsq_grad_scale, project_scales};

/// Picks a bit-width by walking the cumulative probabilities of `bits` (in
/// the given order) until they reach `r`. Layers with `t_l < t_m` draw
/// uniformly; others draw with `p_i = b_i / Σ b`.
pub fn roulette_select(bits: &[u8], t_l: f64, t_m: f64, r: f64) -> Result<u8> {
    if bits.is_empty() || bits.contains(&0) {
        return Err(Error::BitWidthSet(format!("malformed candidate list {bits:?}")));
    }
    let mut seen = bits.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != bits.len() {
        return Err(Error::BitWidthSet(format!("duplicate bit-widths in {bits:?}")));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("roulette draw {r} outside (0, 1]")));
    }
    let probs: Vec<f64> = if t_l < t_m {
        vec![1.0 / bits.len() as f64; bits.len()]
    } else {
        let total: f64 = bits.iter().map(|&b| f64::from(b)).sum();
        bits.iter().map(|&b| f64::from(b) / total).collect()
    };
    let mut cumulative = 0.0;
    for (&b, p) in bits.iter().zip(&probs) {
        cumulative += p;
        if cumulative >= r {
            return Ok(b);
        }
    }
    Ok(bits[bits.len() - 1])
}

/// Bit-switching threshold for `epoch`: `σ_max · (epoch + 1) / total`.
pub fn sigma_schedule(sigma_max: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    Ok(sigma_max * (epoch + 1) as f64 / total_epochs as f64)
}

/// All `n²` transitional normalization keys of a bit set.
pub fn transitional_keys(set: &BitWidthSet) -> Vec<NormKey> {
    set.iter()
        .flat_map(|p| set.iter().map(move |c| NormKey::new(p, c)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Roulette probabilities follow layer sensitivity.
    Hessian,
    /// Every layer draws uniformly from the bit set.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedConfig {
    pub bit_set: BitWidthSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub sigma_max: f64,
    pub sampling: Sampling,
    /// Use ALRS rates for the scales (off by default).
    pub alrs: bool,
    pub alrs_floor: f32,
    pub lsq_grad_scale: bool,
    pub seed: u64,
}

impl MixedConfig {
    pub fn desk(bit_set: BitWidthSet, sampling: Sampling) -> Self {
        Self {
            bit_set,
            epochs: 30,
            batch_size: 64,
            base_lr: 5e-3,
            weight_decay: 5e-5,
            sigma_max: 0.5,
            sampling,
            alrs: false,
            alrs_floor: 0.0,
            lsq_grad_scale: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        if !(self.sigma_max > 0.0 && self.sigma_max <= 1.0) {
            return Err(Error::Config(format!("sigma_max {} outside (0, 1]", self.sigma_max)));
        }
        if self.alrs_floor < 0.0 {
            return Err(Error::Config("alrs_floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-layer bit draw for one forward pass at outer precision `b`: each
/// layer independently keeps `b` or, with probability `sigma`, takes a
/// roulette draw.
pub fn sample_assignment(
    rng: &mut impl Rng,
    set: &BitWidthSet,
    traces: &[f64],
    t_m: f64,
    sigma: f64,
    b: u8,
) -> Result<Vec<u8>> {
    traces
        .iter()
        .map(|&t_l| {
            let r: f64 = rng.gen();
            if r < sigma {
                let draw = 1.0 - rng.gen::<f64>();
                roulette_select(set.bits(), t_l, t_m, draw)
            } else {
                Ok(b)
            }
        })
        .collect()
}

pub struct SuperNetTrainer {
    net: Network,
    config: MixedConfig,
    traces: Vec<f64>,
    t_m: f64,
    weight_opt: Adam,
    scale_opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    histogram: BTreeMap<(usize, u8), u64>,
}

impl SuperNetTrainer {
    /// Starts from a multi-precision network; normalization tables are
    /// expanded to every `(producer, consumer)` pair of the bit set.
    pub fn new(mut net: Network, profile: &SensitivityProfile, config: MixedConfig) -> Result<Self> {
        config.validate()?;
        profile.validate()?;
        let q = net.quantized_layers();
        if profile.len() != q.len() {
            return Err(Error::dim("sensitivity profile", &[q.len()], &[profile.len()]));
        }
        for &li in &q {
            let lin = net.linear(li).expect("quantized layer is linear");
            match &lin.quant {
                Some(qp) => qp.validate(&config.bit_set)?,
                None => return Err(Error::InvalidArgument(format!("layer {li} has no quantizer"))),
            }
        }
        net.set_norm_keys(&transitional_keys(&config.bit_set));
        let (traces, t_m) = match config.sampling {
            Sampling::Hessian => (profile.traces(), profile.mean_trace),
            Sampling::Uniform => (vec![0.0; q.len()], f64::INFINITY),
        };
        Ok(Self {
            weight_opt: Adam::new(AdamConfig {
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            }),
            scale_opt: Adam::new(AdamConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net,
            config,
            traces,
            t_m,
            step: 0,
            histogram: BTreeMap::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &MixedConfig {
        &self.config
    }

    /// Realized bit counts per (network layer, bit) since the last reset.
    pub fn histogram(&self) -> &BTreeMap<(usize, u8), u64> {
        &self.histogram
    }

    /// One iteration: a pass per candidate bit, each with its own sampled
    /// assignment and optimizer step. Returns `(b, assignment, loss)` per pass.
    pub fn train_step(&mut self, batch: &Dataset, lr: f32, sigma: f64) -> Result<Vec<(u8, Vec<u8>, f32)>> {
        let q_layers = self.net.quantized_layers();
        let h = self.config.bit_set.highest();
        let mut out = Vec::new();
        for b in self.config.bit_set.bits().to_vec() {
            let bits = sample_assignment(&mut self.rng, &self.config.bit_set, &self.traces, self.t_m, sigma, b)?;
            for (&li, &bit) in q_layers.iter().zip(&bits) {
                *self.histogram.entry((li, bit)).or_default() += 1;
            }
            let ctx = QuantCtx::new(bits.clone());
            let (_, cache) = self.net.forward_train(&batch.x, Some(&ctx))?;
            let mut grads = self.net.backward(&cache, &batch.y)?;
            if !grads.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "supernet loss diverged at step {} for assignment {bits:?}",
                    self.step
                )));
            }
            if self.config.lsq_grad_scale {
                apply_lsq_grad_scale(&self.net, &mut grads, b);
            }
            let scale_lr = if self.config.alrs {
                let per_layer: Vec<Vec<f32>> = grads.scale_grads_by_layer().into_values().collect();
                alrs_lr(b, lr, &per_layer, h, self.config.alrs_floor).lr
            } else {
                lr
            };
            self.weight_opt.step(&mut self.net, &grads, lr, |id| !id.is_scale())?;
            self.scale_opt.step(&mut self.net, &grads, scale_lr, |id| id.is_scale())?;
            project_scales(&mut self.net);
            out.push((b, bits, grads.loss));
        }
        self.step += 1;
        Ok(out)
    }

    /// Trains for `config.epochs`, logging per-pass losses, uniform-subnet
    /// accuracies and the realized bit histogram of every epoch.
    pub fn fit(&mut self, split: &Split) -> Result<RunLog> {
        let mut log = RunLog::default();
        for epoch in 0..self.config.epochs {
            let lr = cosine_lr(self.config.base_lr, epoch, self.config.epochs)?;
            let sigma = sigma_schedule(self.config.sigma_max, epoch, self.config.epochs)?;
            self.histogram.clear();
            let batches = split.train.batches(self.config.batch_size, &mut self.rng)?;
            let mut loss_sum: BTreeMap<u8, f64> = BTreeMap::new();
            for batch in &batches {
                for (b, _, loss) in self.train_step(batch, lr, sigma)? {
                    *loss_sum.entry(b).or_default() += f64::from(loss);
                }
            }
            debug!("epoch {epoch}: sigma {sigma:.3}, lr {lr:.2e}");
            let n = batches.len().max(1) as f64;
            let layers = self.net.quantized_layers().len();
            for b in self.config.bit_set.iter() {
                log.metrics.push(MetricsRecord {
                    epoch,
                    precision: b.to_string(),
                    loss: (loss_sum.get(&b).copied().unwrap_or(0.0) / n) as f32,
                    accuracy: evaluate_subnet(&self.net, &self.config.bit_set, &vec![b; layers], &split.eval)?,
                    lr_scale: lr,
                });
            }
            for (&(layer, bit), &count) in &self.histogram {
                log.bit_histogram.push(BitHistogramRecord {
                    epoch,
                    layer,
                    bit,
                    count,
                });
            }
        }
        Ok(log)
    }
}

/// Eval-mode accuracy of the subnet with per-quantized-layer bits `bits`.
pub fn evaluate_subnet(net: &Network, set: &BitWidthSet, bits: &[u8], data: &Dataset) -> Result<f32> {
    let layers = net.quantized_layers().len();
    if bits.len() != layers {
        return Err(Error::dim("subnet assignment", &[layers], &[bits.len()]));
    }
    for &b in bits {
        set.check(b)?;
    }
    let pred = net.predict(&data.x, Some(&QuantCtx::new(bits.to_vec())))?;
    Ok(accuracy(&pred, &data.y))
}
