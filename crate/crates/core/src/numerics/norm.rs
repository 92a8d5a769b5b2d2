//! Per-feature batch normalization with keyed running statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const NORM_EPS: f32 = 1e-5;
pub const NORM_MOMENTUM: f32 = 0.1;

/// Bit-width used as a key component for the unquantized model.
pub const FLOAT_BITS: u8 = 32;

/// Key selecting one set of running statistics: the bit-width of the layer
/// feeding this layer and the bit-width of the layer itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormKey {
    pub producer: u8,
    pub consumer: u8,
}

impl NormKey {
    pub const FLOAT: NormKey = NormKey {
        producer: FLOAT_BITS,
        consumer: FLOAT_BITS,
    };

    pub fn new(producer: u8, consumer: u8) -> Self {
        Self { producer, consumer }
    }

    pub fn uniform(b: u8) -> Self {
        Self::new(b, b)
    }
}

impl fmt::Display for NormKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.producer, self.consumer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl NormStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: NORM_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

/// Batch statistics for a `(batch, features, spatial...)` tensor, reduced over
/// every axis except the feature axis. Variance is the biased estimate.
pub(crate) fn batch_stats(x: &DenseTensor, features: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let (batch, spatial) = layout(x, features)?;
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0f64; features];
    let mut sq = vec![0.0f64; features];
    for (idx, &v) in x.data().iter().enumerate() {
        let c = (idx / spatial) % features;
        mean[c] += f64::from(v);
    }
    for m in &mut mean {
        *m /= count;
    }
    for (idx, &v) in x.data().iter().enumerate() {
        let c = (idx / spatial) % features;
        let d = f64::from(v) - mean[c];
        sq[c] += d * d;
    }
    Ok((
        mean.iter().map(|&m| m as f32).collect(),
        sq.iter().map(|&s| (s / count) as f32).collect(),
    ))
}

fn layout(x: &DenseTensor, features: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != features {
        return Err(Error::dim("normalization features", &[features], &shape[1.min(shape.len() - 1)..]));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

/// Normalizes `x` per feature. In training mode batch statistics are used and
/// folded into `stats` with its momentum; in eval mode the stored statistics
/// are used unchanged.
pub fn norm_apply(x: &DenseTensor, stats: &mut NormStats, training: bool) -> Result<DenseTensor> {
    let features = stats.features();
    let (mean, var) = if training {
        let (mean, var) = batch_stats(x, features)?;
        update_running(stats, &mean, &var);
        (mean, var)
    } else {
        layout(x, features)?;
        (stats.mean.clone(), stats.var.clone())
    };
    Ok(normalize(x, &mean, &var))
}

pub(crate) fn update_running(stats: &mut NormStats, mean: &[f32], var: &[f32]) {
    let m = stats.momentum;
    for (r, &b) in stats.mean.iter_mut().zip(mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, &b) in stats.var.iter_mut().zip(var) {
        *r = ((1.0 - m) * *r + m * b).max(0.0);
    }
}

pub(crate) fn normalize(x: &DenseTensor, mean: &[f32], var: &[f32]) -> DenseTensor {
    let features = mean.len();
    let spatial: usize = x.shape()[2..].iter().product();
    let inv: Vec<f32> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let c = (idx / spatial) % features;
        *v = (*v - mean[c]) * inv[c];
    }
    out
}
