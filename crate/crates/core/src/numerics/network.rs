//! Feed-forward network with manual reverse-mode gradients and optional
//! fake quantization of selected layers.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::conv::{conv_backward, conv_forward, ConvGeom};
use crate::numerics::loss::softmax_cross_entropy;
use crate::numerics::norm::{batch_stats, normalize, update_running, NormKey, NormStats, NORM_EPS};
use crate::quantizer::{
    fake_quant_activation, fake_quant_weight_shared, fake_quant_weight_uniform, init_act_scale,
    init_weight_scale, BitWidthSet, FakeQuant, QuantParams,
};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    FullyConnected,
    Conv2d { kernel: usize, padding: usize },
    Relu,
    Flatten,
    BatchNorm,
}

/// Static description of one layer. For convolutions `fan_in`/`fan_out` are
/// channel counts; for shape-preserving layers they are the feature count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub quantized: bool,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize, quantized: bool) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            fan_in,
            fan_out,
            quantized,
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, quantized: bool) -> Self {
        Self {
            kind: LayerKind::Conv2d { kernel, padding },
            fan_in: in_ch,
            fan_out: out_ch,
            quantized,
        }
    }

    fn passthrough(kind: LayerKind, features: usize) -> Self {
        Self {
            kind,
            fan_in: features,
            fan_out: features,
            quantized: false,
        }
    }

    pub fn relu(features: usize) -> Self {
        Self::passthrough(LayerKind::Relu, features)
    }

    pub fn batch_norm(features: usize) -> Self {
        Self::passthrough(LayerKind::BatchNorm, features)
    }

    pub fn flatten(features: usize) -> Self {
        Self::passthrough(LayerKind::Flatten, features)
    }

    fn trainable(&self) -> bool {
        matches!(self.kind, LayerKind::FullyConnected | LayerKind::Conv2d { .. })
    }
}

/// MLP layout: a full-precision input layer, quantized hidden blocks
/// (linear, batch norm, ReLU) and a full-precision classifier.
pub fn mlp_specs(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input;
    for (i, &width) in hidden.iter().enumerate() {
        let quantized = i > 0;
        specs.push(LayerSpec::dense(prev, width, quantized));
        if quantized {
            specs.push(LayerSpec::batch_norm(width));
        }
        specs.push(LayerSpec::relu(width));
        prev = width;
    }
    specs.push(LayerSpec::dense(prev, classes, false));
    specs
}

/// Small conv net: 3x3 same-padded convolutions, the first full precision,
/// then a flattened full-precision classifier.
pub fn conv_specs(in_ch: usize, side: usize, channels: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = in_ch;
    for (i, &ch) in channels.iter().enumerate() {
        let quantized = i > 0;
        specs.push(LayerSpec::conv(prev, ch, 3, 1, quantized));
        if quantized {
            specs.push(LayerSpec::batch_norm(ch));
        }
        specs.push(LayerSpec::relu(ch));
        prev = ch;
    }
    specs.push(LayerSpec::flatten(prev * side * side));
    specs.push(LayerSpec::dense(prev * side * side, classes, false));
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Weight scale; in shared mode keyed by the highest bit-width.
    WeightScale(u8),
    ActScale(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub slot: Slot,
}

impl ParamId {
    pub fn new(layer: usize, slot: Slot) -> Self {
        Self { layer, slot }
    }

    pub fn is_scale(&self) -> bool {
        matches!(self.slot, Slot::WeightScale(_) | Slot::ActScale(_))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slot {
            Slot::Weight => write!(f, "layer{}.weight", self.layer),
            Slot::Bias => write!(f, "layer{}.bias", self.layer),
            Slot::Gamma => write!(f, "layer{}.gamma", self.layer),
            Slot::Beta => write!(f, "layer{}.beta", self.layer),
            Slot::WeightScale(b) => write!(f, "layer{}.weight_scale@{b}", self.layer),
            Slot::ActScale(b) => write!(f, "layer{}.act_scale@{b}", self.layer),
        }
    }
}

/// Gradients keyed by parameter, plus the loss they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub loss: f32,
    grads: BTreeMap<ParamId, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, id: &ParamId) -> Option<&[f32]> {
        self.grads.get(id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut [f32]> {
        self.grads.get_mut(id).map(Vec::as_mut_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Vec<f32>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, g: Vec<f32>) {
        self.grads.insert(id, g);
    }

    fn accumulate(&mut self, id: ParamId, g: Vec<f32>) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    /// Sums another gradient set into this one; losses add too.
    pub fn add(&mut self, other: &Gradients) {
        self.loss += other.loss;
        for (id, g) in &other.grads {
            self.accumulate(*id, g.clone());
        }
    }

    /// Scale gradients grouped by layer, in layer order.
    pub fn scale_grads_by_layer(&self) -> BTreeMap<usize, Vec<f32>> {
        let mut out: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for (id, g) in &self.grads {
            if id.is_scale() {
                out.entry(id.layer).or_default().extend_from_slice(g);
            }
        }
        out
    }
}

/// Per-quantized-layer bit-widths for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantCtx {
    pub bits: Vec<u8>,
}

impl QuantCtx {
    pub fn new(bits: Vec<u8>) -> Self {
        Self { bits }
    }

    pub fn uniform(b: u8, layers: usize) -> Self {
        Self {
            bits: vec![b; layers],
        }
    }

    /// Normalization key for every quantized layer: `(previous quantized
    /// layer's bit, own bit)`, with the first layer keyed `(b, b)`.
    pub fn norm_keys(&self) -> Vec<NormKey> {
        self.bits
            .iter()
            .enumerate()
            .map(|(i, &b)| NormKey::new(if i == 0 { b } else { self.bits[i - 1] }, b))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LinearGeom {
    Dense { fan_in: usize, fan_out: usize },
    Conv(ConvGeom),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub(crate) geom: LinearGeom,
    pub weight: DenseTensor,
    pub bias: Vec<f32>,
    pub quantized: bool,
    pub quant: Option<QuantParams>,
}

impl LinearLayer {
    fn apply(&self, x: &[f32], w: &[f32], batch: usize) -> Vec<f32> {
        match self.geom {
            LinearGeom::Dense { fan_in, fan_out } => {
                let mut y = matmul_nt(x, w, batch, fan_in, fan_out);
                for row in y.chunks_mut(fan_out) {
                    row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
                }
                y
            }
            LinearGeom::Conv(g) => conv_forward(&g, x, w, &self.bias, batch),
        }
    }

    fn apply_backward(&self, dy: &[f32], x: &[f32], w: &[f32], batch: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        match self.geom {
            LinearGeom::Dense { fan_in, fan_out } => {
                let dx = matmul_nn(dy, w, batch, fan_in, fan_out);
                let dw = matmul_tn(dy, x, batch, fan_in, fan_out);
                let mut db = vec![0.0f32; fan_out];
                for row in dy.chunks(fan_out) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                (dx, dw, db)
            }
            LinearGeom::Conv(g) => conv_backward(&g, dy, x, w, batch),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    /// Number of input elements per sample.
    pub fn input_len(&self) -> usize {
        match self.geom {
            LinearGeom::Dense { fan_in, .. } => fan_in,
            LinearGeom::Conv(g) => g.in_ch * g.h * g.w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub stats: BTreeMap<NormKey, NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Norm(NormLayer),
    Relu,
    Flatten,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        input: Vec<f32>,
        weight: Vec<f32>,
        act: Option<FakeQuant>,
        wq: Option<FakeQuant>,
        bits: Option<u8>,
    },
    Norm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        spatial: usize,
        training: bool,
    },
    Relu {
        mask: Vec<bool>,
    },
    Flatten,
}

/// State recorded by [`Network::forward`] for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    batch: usize,
    layers: Vec<LayerCache>,
    shapes: Vec<Vec<usize>>,
    logits: DenseTensor,
    norm_updates: Vec<(usize, NormKey, Vec<f32>, Vec<f32>)>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DenseTensor {
        &self.logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    generation: u64,
}

impl Network {
    /// Builds a network with Kaiming-uniform weights and zero biases.
    /// `input_shape` excludes the batch axis.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut last_linear_quantized = false;
        let trainable: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].trainable()).collect();
        if trainable.is_empty() {
            return Err(Error::InvalidArgument("network has no trainable layer".into()));
        }
        for &i in [trainable[0], trainable[trainable.len() - 1]].iter() {
            if specs[i].quantized {
                return Err(Error::InvalidArgument(
                    "first and last trainable layers must stay full precision".into(),
                ));
            }
        }
        for (idx, spec) in specs.iter().enumerate() {
            let ctx = format!("layer {idx} ({:?})", spec.kind);
            let layer = match spec.kind {
                LayerKind::FullyConnected => {
                    if shape.len() != 1 || shape[0] != spec.fan_in {
                        return Err(Error::dim(ctx, &[spec.fan_in], &shape));
                    }
                    let geom = LinearGeom::Dense {
                        fan_in: spec.fan_in,
                        fan_out: spec.fan_out,
                    };
                    shape = vec![spec.fan_out];
                    last_linear_quantized = spec.quantized;
                    Layer::Linear(init_linear(geom, spec, spec.fan_in, &mut rng)?)
                }
                LayerKind::Conv2d { kernel, padding } => {
                    if shape.len() != 3 || shape[0] != spec.fan_in {
                        return Err(Error::dim(ctx, &[spec.fan_in, 0, 0], &shape));
                    }
                    if shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return Err(Error::InvalidArgument(format!("{ctx}: kernel larger than input")));
                    }
                    let g = ConvGeom {
                        in_ch: spec.fan_in,
                        out_ch: spec.fan_out,
                        h: shape[1],
                        w: shape[2],
                        kernel,
                        padding,
                    };
                    shape = vec![spec.fan_out, g.out_h(), g.out_w()];
                    last_linear_quantized = spec.quantized;
                    Layer::Linear(init_linear(LinearGeom::Conv(g), spec, spec.fan_in * kernel * kernel, &mut rng)?)
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::Flatten => {
                    let n: usize = shape.iter().product();
                    if n != spec.fan_in {
                        return Err(Error::dim(ctx, &[spec.fan_in], &[n]));
                    }
                    shape = vec![n];
                    Layer::Flatten
                }
                LayerKind::BatchNorm => {
                    if shape[0] != spec.fan_in {
                        return Err(Error::dim(ctx, &[spec.fan_in], &shape));
                    }
                    if !last_linear_quantized {
                        return Err(Error::InvalidArgument(format!(
                            "{ctx}: batch norm must follow a quantized layer"
                        )));
                    }
                    let mut stats = BTreeMap::new();
                    stats.insert(NormKey::FLOAT, NormStats::new(spec.fan_in));
                    Layer::Norm(NormLayer {
                        gamma: vec![1.0; spec.fan_in],
                        beta: vec![0.0; spec.fan_in],
                        stats,
                    })
                }
            };
            layers.push(layer);
        }
        if shape.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "network output must be flat, got per-sample shape {shape:?}"
            )));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            layers,
            generation: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.specs
            .iter()
            .rev()
            .find(|s| s.trainable())
            .map(|s| s.fan_out)
            .unwrap_or(0)
    }

    /// Indices (into `layers`) of the quantizable layers, in order.
    pub fn quantized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Linear(lin) if lin.quantized => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn linear(&self, idx: usize) -> Option<&LinearLayer> {
        match self.layers.get(idx) {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, idx: usize) -> Option<&mut LinearLayer> {
        self.generation += 1;
        match self.layers.get_mut(idx) {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    /// All parameter ids currently present, in a stable order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    ids.push(ParamId::new(i, Slot::Weight));
                    ids.push(ParamId::new(i, Slot::Bias));
                    if let Some(q) = &l.quant {
                        if q.shared_weight_scale {
                            ids.push(ParamId::new(i, Slot::WeightScale(q.h)));
                        } else {
                            ids.extend(q.unshared_scales.keys().map(|&b| ParamId::new(i, Slot::WeightScale(b))));
                        }
                        ids.extend(q.act.keys().map(|&b| ParamId::new(i, Slot::ActScale(b))));
                    }
                }
                Layer::Norm(_) => {
                    ids.push(ParamId::new(i, Slot::Gamma));
                    ids.push(ParamId::new(i, Slot::Beta));
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        ids.sort();
        ids
    }

    pub fn param(&self, id: &ParamId) -> Option<&[f32]> {
        match (self.layers.get(id.layer)?, id.slot) {
            (Layer::Linear(l), Slot::Weight) => Some(l.weight.data()),
            (Layer::Linear(l), Slot::Bias) => Some(&l.bias),
            (Layer::Linear(l), Slot::WeightScale(b)) => {
                let q = l.quant.as_ref()?;
                if q.shared_weight_scale {
                    (b == q.h).then(|| std::slice::from_ref(&q.s_h))
                } else {
                    q.unshared_scales.get(&b).map(std::slice::from_ref)
                }
            }
            (Layer::Linear(l), Slot::ActScale(b)) => {
                l.quant.as_ref()?.act.get(&b).map(|a| std::slice::from_ref(&a.scale))
            }
            (Layer::Norm(n), Slot::Gamma) => Some(&n.gamma),
            (Layer::Norm(n), Slot::Beta) => Some(&n.beta),
            _ => None,
        }
    }

    /// Mutable access to one parameter. Invalidates outstanding forward caches.
    pub fn param_mut(&mut self, id: &ParamId) -> Option<&mut [f32]> {
        self.generation += 1;
        match (self.layers.get_mut(id.layer)?, id.slot) {
            (Layer::Linear(l), Slot::Weight) => Some(l.weight.data_mut()),
            (Layer::Linear(l), Slot::Bias) => Some(&mut l.bias),
            (Layer::Linear(l), Slot::WeightScale(b)) => {
                let q = l.quant.as_mut()?;
                if q.shared_weight_scale {
                    (b == q.h).then(|| std::slice::from_mut(&mut q.s_h))
                } else {
                    q.unshared_scales.get_mut(&b).map(std::slice::from_mut)
                }
            }
            (Layer::Linear(l), Slot::ActScale(b)) => {
                l.quant.as_mut()?.act.get_mut(&b).map(|a| std::slice::from_mut(&mut a.scale))
            }
            (Layer::Norm(n), Slot::Gamma) => Some(&mut n.gamma),
            (Layer::Norm(n), Slot::Beta) => Some(&mut n.beta),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_ids()
            .iter()
            .filter(|id| !id.is_scale())
            .filter_map(|id| self.param(id))
            .map(<[f32]>::len)
            .sum()
    }

    /// Attaches quantizers to every quantizable layer. Weight scales use the
    /// LSQ-style rule; activation scales use the maximum layer input observed
    /// on `calib` under the full-precision forward.
    pub fn init_quantization(&mut self, set: &BitWidthSet, calib: &DenseTensor, shared: bool) -> Result<()> {
        let (_, cache) = self.forward(calib, None, Mode::Eval)?;
        let q_layers = self.quantized_layers();
        let mut maxima = Vec::with_capacity(q_layers.len());
        for &i in &q_layers {
            match &cache.layers[i] {
                LayerCache::Linear { input, .. } => {
                    maxima.push(input.iter().fold(0.0f32, |m, &v| m.max(v)));
                }
                _ => unreachable!("quantized layer index always refers to a linear layer"),
            }
        }
        for (&i, max) in q_layers.iter().zip(maxima) {
            let Some(Layer::Linear(l)) = self.layers.get_mut(i) else {
                unreachable!()
            };
            let act: BTreeMap<u8, f32> = set.iter().map(|b| (b, init_act_scale(max, b))).collect();
            let mut qp = QuantParams::shared(set, init_weight_scale(l.weight.data(), set.highest()), &act)?;
            if !shared {
                qp.shared_weight_scale = false;
                qp.unshared_scales = set
                    .iter()
                    .map(|b| (b, init_weight_scale(l.weight.data(), b)))
                    .collect();
            }
            qp.validate(set)?;
            l.quant = Some(qp);
        }
        self.generation += 1;
        Ok(())
    }

    /// Replaces every normalization table with `keys`, each seeded from the
    /// current full-precision statistics.
    pub fn reset_norm_keys(&mut self, keys: &[NormKey]) {
        for layer in &mut self.layers {
            if let Layer::Norm(n) = layer {
                let seed = n
                    .stats
                    .get(&NormKey::FLOAT)
                    .or_else(|| n.stats.values().next())
                    .cloned()
                    .unwrap_or_else(|| NormStats::new(n.gamma.len()));
                n.stats = keys.iter().map(|&k| (k, seed.clone())).collect();
            }
        }
    }

    /// Sets every normalization table to exactly `keys`. Existing entries are
    /// kept; a new `(p, c)` entry is seeded from `(c, c)`, then from the
    /// full-precision entry, then from any entry.
    pub fn set_norm_keys(&mut self, keys: &[NormKey]) {
        for layer in &mut self.layers {
            if let Layer::Norm(n) = layer {
                let old = std::mem::take(&mut n.stats);
                let features = n.gamma.len();
                n.stats = keys
                    .iter()
                    .map(|&k| {
                        let seed = old
                            .get(&k)
                            .or_else(|| old.get(&NormKey::uniform(k.consumer)))
                            .or_else(|| old.get(&NormKey::FLOAT))
                            .or_else(|| old.values().next())
                            .cloned()
                            .unwrap_or_else(|| NormStats::new(features));
                        (k, seed)
                    })
                    .collect();
            }
        }
    }

    /// Keys present in the first normalization table.
    pub fn norm_keys(&self) -> Vec<NormKey> {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Norm(n) => Some(n.stats.keys().copied().collect()),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn norm_stats(&self, layer: usize, key: &NormKey) -> Option<&NormStats> {
        match self.layers.get(layer) {
            Some(Layer::Norm(n)) => n.stats.get(key),
            _ => None,
        }
    }

    fn check_input(&self, x: &DenseTensor) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::dim("network input", &expected, shape));
        }
        Ok(shape[0])
    }

    /// Forward pass. With `ctx`, every quantized layer fake-quantizes its
    /// weights and input activations at the bit-width the context assigns.
    /// Training mode normalizes with batch statistics; the running statistics
    /// are updated only by [`Network::commit_norm_stats`].
    pub fn forward(&self, x: &DenseTensor, ctx: Option<&QuantCtx>, mode: Mode) -> Result<(DenseTensor, ForwardCache)> {
        let batch = self.check_input(x)?;
        let n_quant = self.quantized_layers().len();
        let keys = match ctx {
            Some(c) => {
                if c.bits.len() != n_quant {
                    return Err(Error::dim("quantization context", &[n_quant], &[c.bits.len()]));
                }
                Some(c.norm_keys())
            }
            None => None,
        };
        let training = mode == Mode::Train;
        let mut h = x.data().to_vec();
        let mut shape: Vec<usize> = x.shape().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut norm_updates = Vec::new();
        let mut q_index = 0usize;
        let mut key = NormKey::FLOAT;
        for (li, layer) in self.layers.iter().enumerate() {
            shapes.push(shape.clone());
            match layer {
                Layer::Linear(lin) => {
                    let mut bits = None;
                    let (input, act, weight, wq) = match (ctx, lin.quantized) {
                        (Some(c), true) => {
                            let b = c.bits[q_index];
                            key = keys.as_ref().expect("keys exist with ctx")[q_index];
                            q_index += 1;
                            bits = Some(b);
                            let qp = lin.quant.as_ref().ok_or_else(|| {
                                Error::InvalidArgument(format!("layer {li} has no quantization parameters"))
                            })?;
                            let a = qp.act_for(b)?;
                            let act = fake_quant_activation(&h, a.scale, b)?;
                            let wq = if qp.shared_weight_scale {
                                if b > qp.h {
                                    return Err(Error::UnknownBitWidth {
                                        bits: b,
                                        set: qp.act.keys().copied().collect(),
                                    });
                                }
                                fake_quant_weight_shared(lin.weight.data(), qp.s_h, qp.h, b)?
                            } else {
                                let s = qp.unshared_scales.get(&b).copied().ok_or_else(|| Error::UnknownBitWidth {
                                    bits: b,
                                    set: qp.unshared_scales.keys().copied().collect(),
                                })?;
                                fake_quant_weight_uniform(lin.weight.data(), s, b)?
                            };
                            (act.dequant.clone(), Some(act), wq.dequant.clone(), Some(wq))
                        }
                        (_, quantized) => {
                            if quantized {
                                q_index += 1;
                            }
                            (h.clone(), None, lin.weight.data().to_vec(), None)
                        }
                    };
                    h = lin.apply(&input, &weight, batch);
                    shape = match lin.geom {
                        LinearGeom::Dense { fan_out, .. } => vec![batch, fan_out],
                        LinearGeom::Conv(g) => vec![batch, g.out_ch, g.out_h(), g.out_w()],
                    };
                    caches.push(LayerCache::Linear {
                        input,
                        weight,
                        act,
                        wq,
                        bits,
                    });
                }
                Layer::Norm(norm) => {
                    let features = norm.gamma.len();
                    let t = DenseTensor::new(shape.clone(), std::mem::take(&mut h))?;
                    let (mean, var) = if training {
                        let (m, v) = batch_stats(&t, features)?;
                        norm_updates.push((li, key, m.clone(), v.clone()));
                        (m, v)
                    } else {
                        let st = norm
                            .stats
                            .get(&key)
                            .ok_or_else(|| Error::MissingNormStats(format!("layer {li}, key {key}")))?;
                        (st.mean.clone(), st.var.clone())
                    };
                    if training && !norm.stats.contains_key(&key) {
                        return Err(Error::MissingNormStats(format!("layer {li}, key {key}")));
                    }
                    let xhat = normalize(&t, &mean, &var).into_data();
                    let spatial: usize = shape[2..].iter().product();
                    h = xhat
                        .iter()
                        .enumerate()
                        .map(|(idx, &v)| {
                            let c = (idx / spatial) % features;
                            norm.gamma[c] * v + norm.beta[c]
                        })
                        .collect();
                    caches.push(LayerCache::Norm {
                        xhat,
                        inv_std: var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
                        spatial,
                        training,
                    });
                }
                Layer::Relu => {
                    let mask: Vec<bool> = h.iter().map(|&v| v > 0.0).collect();
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(LayerCache::Relu { mask });
                }
                Layer::Flatten => {
                    shape = vec![batch, shape[1..].iter().product()];
                    caches.push(LayerCache::Flatten);
                }
            }
        }
        let logits = DenseTensor::new(shape, h)?;
        if !logits.all_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok((
            logits.clone(),
            ForwardCache {
                generation: self.generation,
                batch,
                layers: caches,
                shapes,
                logits,
                norm_updates,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode forward into the running
    /// statistics they were keyed by.
    pub fn commit_norm_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        for (li, key, mean, var) in &cache.norm_updates {
            let Some(Layer::Norm(n)) = self.layers.get_mut(*li) else {
                return Err(Error::StaleCache(format!("layer {li} is not a norm layer")));
            };
            let st = n
                .stats
                .get_mut(key)
                .ok_or_else(|| Error::MissingNormStats(format!("layer {li}, key {key}")))?;
            update_running(st, mean, var);
        }
        Ok(())
    }

    /// Training-mode forward followed by the running-statistics update.
    pub fn forward_train(&mut self, x: &DenseTensor, ctx: Option<&QuantCtx>) -> Result<(DenseTensor, ForwardCache)> {
        let (logits, cache) = self.forward(x, ctx, Mode::Train)?;
        self.commit_norm_stats(&cache)?;
        Ok((logits, cache))
    }

    /// Gradients of the mean cross-entropy for every parameter (and every
    /// quantization scale in use) touched by the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from generation {}, network at {}",
                cache.generation, self.generation
            )));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count changed".into()));
        }
        let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
        let mut grads = Gradients {
            loss,
            grads: BTreeMap::new(),
        };
        let batch = cache.batch;
        let mut dy = dlogits.into_data();
        for li in (0..self.layers.len()).rev() {
            match (&self.layers[li], &cache.layers[li]) {
                (
                    Layer::Linear(lin),
                    LayerCache::Linear {
                        input,
                        weight,
                        act,
                        wq,
                        bits,
                    },
                ) => {
                    let (dx_hat, dw_hat, db) = lin.apply_backward(&dy, input, weight, batch);
                    grads.insert(ParamId::new(li, Slot::Bias), db);
                    match (wq, act, bits, &lin.quant) {
                        (Some(wq), Some(act), Some(b), Some(qp)) => {
                            let ws_slot = if qp.shared_weight_scale {
                                Slot::WeightScale(qp.h)
                            } else {
                                Slot::WeightScale(*b)
                            };
                            grads.accumulate(ParamId::new(li, ws_slot), vec![wq.scale_grad(&dw_hat)]);
                            grads.insert(ParamId::new(li, Slot::Weight), wq.input_grad(&dw_hat));
                            grads.insert(ParamId::new(li, Slot::ActScale(*b)), vec![act.scale_grad(&dx_hat)]);
                            dy = act.input_grad(&dx_hat);
                        }
                        _ => {
                            grads.insert(ParamId::new(li, Slot::Weight), dw_hat);
                            dy = dx_hat;
                        }
                    }
                }
                (
                    Layer::Norm(norm),
                    LayerCache::Norm {
                        xhat,
                        inv_std,
                        spatial,
                        training,
                    },
                ) => {
                    let features = norm.gamma.len();
                    let chan = |idx: usize| (idx / spatial) % features;
                    let mut dgamma = vec![0.0f32; features];
                    let mut dbeta = vec![0.0f32; features];
                    for (idx, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                        let c = chan(idx);
                        dgamma[c] += g * xh;
                        dbeta[c] += g;
                    }
                    let mut dx = vec![0.0f32; dy.len()];
                    if *training {
                        let count = (batch * spatial) as f32;
                        let mut sum_dxhat = vec![0.0f32; features];
                        let mut sum_dxhat_xhat = vec![0.0f32; features];
                        for (idx, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                            let c = chan(idx);
                            let d = g * norm.gamma[c];
                            sum_dxhat[c] += d;
                            sum_dxhat_xhat[c] += d * xh;
                        }
                        for (idx, out) in dx.iter_mut().enumerate() {
                            let c = chan(idx);
                            let d = dy[idx] * norm.gamma[c];
                            *out = inv_std[c] / count * (count * d - sum_dxhat[c] - xhat[idx] * sum_dxhat_xhat[c]);
                        }
                    } else {
                        for (idx, out) in dx.iter_mut().enumerate() {
                            let c = chan(idx);
                            *out = dy[idx] * norm.gamma[c] * inv_std[c];
                        }
                    }
                    grads.insert(ParamId::new(li, Slot::Gamma), dgamma);
                    grads.insert(ParamId::new(li, Slot::Beta), dbeta);
                    dy = dx;
                }
                (Layer::Relu, LayerCache::Relu { mask }) => {
                    dy.iter_mut().zip(mask).for_each(|(g, &m)| {
                        if !m {
                            *g = 0.0;
                        }
                    });
                }
                (Layer::Flatten, LayerCache::Flatten) => {
                    debug_assert_eq!(dy.len(), cache.shapes[li].iter().product::<usize>());
                }
                _ => return Err(Error::StaleCache(format!("layer {li} kind changed"))),
            }
        }
        for g in grads.grads.values() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        Ok(grads)
    }

    /// Forward + backward in one call.
    pub fn loss_and_grads(&self, x: &DenseTensor, labels: &[usize], ctx: Option<&QuantCtx>, mode: Mode) -> Result<Gradients> {
        let (_, cache) = self.forward(x, ctx, mode)?;
        self.backward(&cache, labels)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &DenseTensor, labels: &[usize], ctx: Option<&QuantCtx>, mode: Mode) -> Result<f32> {
        let (logits, _) = self.forward(x, ctx, mode)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// Eval-mode predicted classes.
    pub fn predict(&self, x: &DenseTensor, ctx: Option<&QuantCtx>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x, ctx, Mode::Eval)?;
        Ok(logits.argmax_rows())
    }
}

fn init_linear(geom: LinearGeom, spec: &LayerSpec, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<LinearLayer> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let (shape, out) = match geom {
        LinearGeom::Dense { fan_in, fan_out } => (vec![fan_out, fan_in], fan_out),
        LinearGeom::Conv(g) => (vec![g.out_ch, g.in_ch, g.kernel, g.kernel], g.out_ch),
    };
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(LinearLayer {
        geom,
        weight: DenseTensor::new(shape, data)?,
        bias: vec![0.0; out],
        quantized: spec.quantized,
        quant: None,
    })
}
