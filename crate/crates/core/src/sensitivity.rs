//! Per-layer Hessian-trace sensitivity via Hutchinson's estimator.
//!
//! Hessian-vector products come from central differences of first-order
//! gradients: `Hv ≈ (∇L(θ + εv) − ∇L(θ − εv)) / 2ε` with
//! `ε = 1e-4 · (1 + ‖θ‖∞)`. Larger steps let ReLU pre-activations cross
//! zero during the difference, which biases the estimate upward.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Mode, Network, ParamId, Slot};

pub const DEFAULT_PROBES: usize = 128;
pub const DEFAULT_SAMPLES: usize = 1000;
const EPS_REL: f64 = 1e-4;
const RETRY_SHRINK: f64 = 0.1;

/// Hutchinson estimate with its per-probe spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error of `mean` over probes (0 for a single probe).
    pub std_err: f64,
    pub probes: usize,
}

fn rademacher(seed: u64, probe: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(probe as u64);
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn quad_form(theta: &[f64], v: &[f64], eps: f64, grad: &mut impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::dim("hessian_trace gradient", &[theta.len()], &[gp.len().min(gm.len())]));
    }
    Ok(gp.iter().zip(&gm).zip(v).map(|((a, b), d)| d * (a - b) / (2.0 * eps)).sum())
}

/// Estimates `tr(H)` of a scalar function at `theta` from its gradient.
///
/// Probe `j` draws its Rademacher vector from stream `j` of a ChaCha8 RNG
/// seeded with `seed`, so results are independent of evaluation order.
pub fn hessian_trace<F>(theta: &[f64], mut grad: F, probes: usize, seed: u64) -> Result<TraceEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if probes == 0 {
        return Err(Error::InvalidArgument("probe count must be at least 1".into()));
    }
    if theta.is_empty() {
        return Err(Error::InvalidArgument("empty parameter vector".into()));
    }
    let inf_norm = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let eps = EPS_REL * (1.0 + inf_norm);
    let mut samples = Vec::with_capacity(probes);
    for j in 0..probes {
        let v = rademacher(seed, j, theta.len());
        let mut q = quad_form(theta, &v, eps, &mut grad);
        if !matches!(q, Ok(x) if x.is_finite()) {
            warn!("non-finite Hessian-vector product at probe {j}; retrying with smaller step");
            q = quad_form(theta, &v, eps * RETRY_SHRINK, &mut grad);
        }
        match q {
            Ok(x) if x.is_finite() => samples.push(x),
            Ok(_) => return Err(Error::Numerical(format!("non-finite Hessian-vector product at probe {j}"))),
            Err(e) => return Err(e),
        }
    }
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let std_err = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        mean,
        std_err,
        probes,
    })
}

/// Trace of the loss Hessian restricted to the weights of layer `layer`,
/// evaluated on the full-precision path with frozen normalization stats.
pub fn layer_hessian_trace(net: &Network, data: &Dataset, layer: usize, probes: usize, seed: u64) -> Result<TraceEstimate> {
    let id = ParamId::new(layer, Slot::Weight);
    let theta: Vec<f64> = net
        .param(&id)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no weights")))?
        .iter()
        .map(|&w| f64::from(w))
        .collect();
    let mut work = net.clone();
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let dst = work.param_mut(&id).expect("weight slot checked above");
        dst.iter_mut().zip(p).for_each(|(d, s)| *d = *s as f32);
        let g = work.loss_and_grads(&data.x, &data.y, None, Mode::Eval)?;
        let gw = g
            .get(&id)
            .ok_or_else(|| Error::Numerical(format!("no gradient for {id}")))?;
        Ok(gw.iter().map(|&v| f64::from(v)).collect())
    };
    hessian_trace(&theta, grad, probes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sensitivity {
    Sensitive,
    Insensitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub name: String,
    /// Index of the layer inside the network.
    pub layer: usize,
    /// Hessian trace `t_l` (estimates below zero are clamped to 0).
    pub trace: f64,
    /// Parameter count `n_l`.
    pub params: usize,
}

/// Per-quantized-layer traces and their mean `t_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub layers: Vec<LayerSensitivity>,
    pub mean_trace: f64,
    pub probes: usize,
    pub seed: u64,
}

impl SensitivityProfile {
    /// Builds a profile from raw traces, computing `t_m`.
    pub fn new(layers: Vec<LayerSensitivity>, probes: usize, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("sensitivity profile needs at least one layer".into()));
        }
        let mean_trace = layers.iter().map(|l| l.trace).sum::<f64>() / layers.len() as f64;
        let p = Self {
            layers,
            mean_trace,
            probes,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("sensitivity profile has no layers".into()));
        }
        for l in &self.layers {
            if !(l.trace.is_finite() && l.trace >= 0.0) {
                return Err(Error::InvalidArgument(format!("{}: trace {} is not a non-negative number", l.name, l.trace)));
            }
            if l.params == 0 {
                return Err(Error::InvalidArgument(format!("{}: zero parameter count", l.name)));
            }
        }
        let mean = self.layers.iter().map(|l| l.trace).sum::<f64>() / self.layers.len() as f64;
        if (mean - self.mean_trace).abs() > 1e-9 * mean.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "mean trace {} does not match layer mean {mean}",
                self.mean_trace
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn traces(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.trace).collect()
    }

    /// Search weights `t_l / n_l`.
    pub fn weights(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.trace / l.params as f64).collect()
    }

    pub fn classify(&self) -> Vec<Sensitivity> {
        classify_layers(&self.traces(), self.mean_trace)
    }
}

/// A layer is sensitive when `t_l >= t_m`; ties count as sensitive.
pub fn classify_layers(traces: &[f64], mean: f64) -> Vec<Sensitivity> {
    traces
        .iter()
        .map(|&t| if t < mean { Sensitivity::Insensitive } else { Sensitivity::Sensitive })
        .collect()
}

/// Profiles every quantized layer of `net` on `data`.
pub fn profile_network(net: &Network, data: &Dataset, probes: usize, seed: u64) -> Result<SensitivityProfile> {
    let quantized = net.quantized_layers();
    if quantized.is_empty() {
        return Err(Error::InvalidArgument("network has no quantized layers".into()));
    }
    let mut layers = Vec::with_capacity(quantized.len());
    for (i, &li) in quantized.iter().enumerate() {
        let layer_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let est = layer_hessian_trace(net, data, li, probes, layer_seed)?;
        if est.mean < 0.0 {
            warn!("layer {li}: negative trace estimate {} clamped to 0", est.mean);
        }
        let params = net.param(&ParamId::new(li, Slot::Weight)).map_or(0, <[f32]>::len);
        layers.push(LayerSensitivity {
            name: format!("layer{li}"),
            layer: li,
            trace: est.mean.max(0.0),
            params,
        });
    }
    SensitivityProfile::new(layers, probes, seed)
}
