//! Independent f64 reference implementations shared by integration tests.
#![allow(dead_code)]

use drq_core::numerics::{LayerKind, LayerSpec, Network, ParamId, Slot};
use drq_core::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// f64 copy of every parameter, keyed like the network.
#[derive(Clone)]
pub struct RefParams {
    pub ids: Vec<ParamId>,
    pub values: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn from(net: &Network) -> Self {
        let ids: Vec<ParamId> = net.param_ids().into_iter().filter(|id| !id.is_scale()).collect();
        let values = ids
            .iter()
            .map(|id| net.param(id).unwrap().iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self { ids, values }
    }

    pub fn get(&self, layer: usize, slot: Slot) -> &[f64] {
        let i = self.ids.iter().position(|id| *id == ParamId::new(layer, slot)).unwrap();
        &self.values[i]
    }
}

/// Training-mode loss with batch-statistics normalization, written with plain loops.
pub fn reference_loss(specs: &[LayerSpec], input_shape: &[usize], p: &RefParams, x: &[f64], labels: &[usize]) -> f64 {
    let batch = labels.len();
    let mut shape: Vec<usize> = input_shape.to_vec();
    let mut h: Vec<f64> = x.to_vec();
    for (li, spec) in specs.iter().enumerate() {
        match spec.kind {
            LayerKind::FullyConnected => {
                let (fi, fo) = (spec.fan_in, spec.fan_out);
                let w = p.get(li, Slot::Weight);
                let b = p.get(li, Slot::Bias);
                let mut out = vec![0.0; batch * fo];
                for n in 0..batch {
                    for o in 0..fo {
                        let mut acc = b[o];
                        for i in 0..fi {
                            acc += w[o * fi + i] * h[n * fi + i];
                        }
                        out[n * fo + o] = acc;
                    }
                }
                h = out;
                shape = vec![fo];
            }
            LayerKind::Conv2d { kernel, padding } => {
                let (c_in, hh, ww) = (shape[0], shape[1], shape[2]);
                let c_out = spec.fan_out;
                let (oh, ow) = (hh + 2 * padding + 1 - kernel, ww + 2 * padding + 1 - kernel);
                let w = p.get(li, Slot::Weight);
                let b = p.get(li, Slot::Bias);
                let mut out = vec![0.0; batch * c_out * oh * ow];
                for n in 0..batch {
                    for o in 0..c_out {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut acc = b[o];
                                for c in 0..c_in {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = y as isize + ky as isize - padding as isize;
                                            let ix = xx as isize + kx as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                                                continue;
                                            }
                                            let wi = ((o * c_in + c) * kernel + ky) * kernel + kx;
                                            let xi = ((n * c_in + c) * hh + iy as usize) * ww + ix as usize;
                                            acc += w[wi] * h[xi];
                                        }
                                    }
                                }
                                out[((n * c_out + o) * oh + y) * ow + xx] = acc;
                            }
                        }
                    }
                }
                h = out;
                shape = vec![c_out, oh, ow];
            }
            LayerKind::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::Flatten => shape = vec![shape.iter().product()],
            LayerKind::BatchNorm => {
                let feats = shape[0];
                let spatial: usize = shape[1..].iter().product();
                let gamma = p.get(li, Slot::Gamma);
                let beta = p.get(li, Slot::Beta);
                let count = (batch * spatial) as f64;
                for c in 0..feats {
                    let idx = |n: usize, s: usize| (n * feats + c) * spatial + s;
                    let mut mean = 0.0;
                    for n in 0..batch {
                        for s in 0..spatial {
                            mean += h[idx(n, s)];
                        }
                    }
                    mean /= count;
                    let mut var = 0.0;
                    for n in 0..batch {
                        for s in 0..spatial {
                            var += (h[idx(n, s)] - mean).powi(2);
                        }
                    }
                    var /= count;
                    let inv = 1.0 / (var + 1e-5).sqrt();
                    for n in 0..batch {
                        for s in 0..spatial {
                            let v = &mut h[idx(n, s)];
                            *v = gamma[c] * (*v - mean) * inv + beta[c];
                        }
                    }
                }
            }
        }
    }
    let classes = shape[0];
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = &h[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / batch as f64
}

pub fn random_input(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

