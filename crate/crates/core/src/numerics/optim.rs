//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::network::{Gradients, Network, ParamId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Adam over a subset of a network's parameters, selected by a predicate on
/// the parameter id.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one step to every parameter with a gradient that `select`
    /// accepts. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        lr: f32,
        select: impl Fn(&ParamId) -> bool,
    ) -> Result<()> {
        for (id, g) in grads.iter() {
            if !select(id) {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(id.to_string()));
            }
            let p = net
                .param_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {id}")))?;
            let st = self.state.entry(*id).or_default();
            adam_step(p, g, st, lr, &self.config)?;
        }
        Ok(())
    }
}

fn adam_step(p: &mut [f32], g: &[f32], st: &mut Moments, lr: f32, c: &AdamConfig) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::dim("adam gradient", &[p.len()], &[g.len()]));
    }
    if st.m.is_empty() {
        st.m = vec![0.0; p.len()];
        st.v = vec![0.0; p.len()];
    }
    st.t += 1;
    let bc1 = 1.0 - c.beta1.powi(st.t);
    let bc2 = 1.0 - c.beta2.powi(st.t);
    for i in 0..p.len() {
        st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
        st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        p[i] -= lr * c.weight_decay * p[i];
        p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

/// Standalone Adam step on a flat parameter vector, keeping moments in `state`.
pub fn adam_step_flat(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    lr: f32,
    config: &AdamConfig,
) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("element {i}")));
    }
    adam_step(params, grads, &mut state.0, lr, config)
}

/// Moment buffers for [`adam_step_flat`].
#[derive(Debug, Clone, Default)]
pub struct AdamState(Moments);

/// `base_lr · 0.5 · (1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(base_lr: f32, epoch: usize, total_epochs: usize) -> Result<f32> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {total_epochs})"
        )));
    }
    let phase = PI * epoch as f64 / total_epochs as f64;
    Ok((f64::from(base_lr) * 0.5 * (1.0 + phase.cos())) as f32)
}
