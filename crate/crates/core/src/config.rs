//! Run configuration, validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::mixedprec::{MixedConfig, Sampling};
use crate::numerics::{conv_specs, mlp_specs, LayerSpec};
use crate::quantizer::BitWidthSet;
use crate::search::Sense;
use crate::sensitivity::{DEFAULT_PROBES, DEFAULT_SAMPLES};
use crate::trainer::{BitOrder, FloatTrainConfig, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Multiprec,
    Mixedprec,
    Search,
    Sensitivity,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Full-precision input layer, quantized hidden blocks, full-precision head.
    Mlp { hidden: Vec<usize> },
    /// 3x3 convolutions over `(channels, side, side)` inputs.
    Conv { channels: Vec<usize> },
}

impl ModelSpec {
    /// Layer list for inputs of per-sample shape `input` and `classes` outputs.
    pub fn layers(&self, input: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        match self {
            ModelSpec::Mlp { hidden } => {
                if input.len() != 1 {
                    return Err(Error::Config(format!("an MLP needs flat inputs, got shape {input:?}")));
                }
                if hidden.len() < 2 {
                    return Err(Error::Config("an MLP needs at least two hidden layers to quantize one".into()));
                }
                Ok(mlp_specs(input[0], hidden, classes))
            }
            ModelSpec::Conv { channels } => {
                if input.len() != 3 || input[1] != input[2] {
                    return Err(Error::Config(format!("a conv net needs square (c, s, s) inputs, got {input:?}")));
                }
                if channels.len() < 2 {
                    return Err(Error::Config("a conv net needs at least two convolutions".into()));
                }
                Ok(conv_specs(input[0], input[1], channels, classes))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = FloatTrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiprecSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub mode: TrainMode,
    pub alrs_floor: f32,
    pub shared_weight_scale: bool,
    pub bit_order: BitOrder,
    pub lsq_grad_scale: bool,
}

impl Default for MultiprecSettings {
    fn default() -> Self {
        let d = TrainConfig::desk(BitWidthSet::new(vec![8]).expect("valid"), TrainMode::Alrs);
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            weight_decay: d.weight_decay,
            mode: d.mode,
            alrs_floor: d.alrs_floor,
            shared_weight_scale: d.shared_weight_scale,
            bit_order: d.bit_order,
            lsq_grad_scale: d.lsq_grad_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub sigma_max: f64,
    pub sampling: Sampling,
    pub alrs: bool,
    pub alrs_floor: f32,
    pub lsq_grad_scale: bool,
}

impl Default for MixedSettings {
    fn default() -> Self {
        let d = MixedConfig::desk(BitWidthSet::new(vec![8]).expect("valid"), Sampling::Hessian);
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            weight_decay: d.weight_decay,
            sigma_max: d.sigma_max,
            sampling: d.sampling,
            alrs: d.alrs,
            alrs_floor: d.alrs_floor,
            lsq_grad_scale: d.lsq_grad_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySettings {
    pub probes: usize,
    /// Training samples used for the Hessian estimate.
    pub samples: usize,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES,
            samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    /// Target average bit-widths; empty means every achievable value.
    pub omegas: Vec<f64>,
    pub sense: Sense,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            omegas: Vec::new(),
            sense: Sense::Maximize,
        }
    }
}

/// Number of training samples used to calibrate activation scales.
pub const CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub bit_set: BitWidthSet,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub multiprec: MultiprecSettings,
    #[serde(default)]
    pub mixed: MixedSettings,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub search: SearchSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        match &self.dataset {
            DatasetSpec::GaussianBlobs { classes, dims, samples, noise, separation, .. } => {
                if *classes < 2 || *dims == 0 || *samples < 2 * classes || *noise < 0.0 || *separation < 0.0 {
                    return Err(Error::Config("gaussian-blobs needs ≥ 2 classes, ≥ 1 dim, enough samples and non-negative noise/separation".into()));
                }
            }
            DatasetSpec::TwoMoons { samples, noise, .. } => {
                if *samples < 4 || *noise < 0.0 {
                    return Err(Error::Config("two-moons needs ≥ 4 samples and non-negative noise".into()));
                }
            }
            DatasetSpec::Idx { eval_fraction, .. } => {
                if !(*eval_fraction > 0.0 && *eval_fraction < 1.0) {
                    return Err(Error::Config("idx eval_fraction must lie in (0, 1)".into()));
                }
            }
        }
        match &self.model {
            ModelSpec::Mlp { hidden } | ModelSpec::Conv { channels: hidden } => {
                if hidden.len() < 2 {
                    return Err(Error::Config("the model needs at least two hidden layers".into()));
                }
                if hidden.contains(&0) {
                    return Err(Error::Config("layer widths must be positive".into()));
                }
            }
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || p.lr.is_nan() || p.lr <= 0.0 || p.weight_decay < 0.0 {
            return Err(Error::Config("pretrain settings must be positive".into()));
        }
        self.train_config(self.seeds[0]).validate().map_err(config_err)?;
        self.mixed_config(self.seeds[0]).validate().map_err(config_err)?;
        if self.sensitivity.probes == 0 || self.sensitivity.samples == 0 {
            return Err(Error::Config("sensitivity probes and samples must be positive".into()));
        }
        if self.search.omegas.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("search omegas must be positive".into()));
        }
        Ok(())
    }

    pub fn float_config(&self, seed: u64) -> FloatTrainConfig {
        FloatTrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            weight_decay: self.pretrain.weight_decay,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let m = &self.multiprec;
        TrainConfig {
            bit_set: self.bit_set.clone(),
            epochs: m.epochs,
            batch_size: m.batch_size,
            base_lr: m.base_lr,
            weight_decay: m.weight_decay,
            mode: m.mode,
            alrs_floor: m.alrs_floor,
            shared_weight_scale: m.shared_weight_scale,
            bit_order: m.bit_order,
            lsq_grad_scale: m.lsq_grad_scale,
            seed,
        }
    }

    pub fn mixed_config(&self, seed: u64) -> MixedConfig {
        let m = &self.mixed;
        MixedConfig {
            bit_set: self.bit_set.clone(),
            epochs: m.epochs,
            batch_size: m.batch_size,
            base_lr: m.base_lr,
            weight_decay: m.weight_decay,
            sigma_max: m.sigma_max,
            sampling: m.sampling,
            alrs: m.alrs,
            alrs_floor: m.alrs_floor,
            lsq_grad_scale: m.lsq_grad_scale,
            seed,
        }
    }

    /// Output directory for one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}
