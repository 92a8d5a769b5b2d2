//! Binary checkpoint format.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! "DRQ1" | mode u8 (0 shared, 1 unshared) | h u8 | layer count u32
//! input rank u8 | input dims u32 ...
//! per layer:
//!   name len u16 | name utf-8 | kind u8 | fan_in u32 | fan_out u32 | quantized u8
//!   conv:   kernel u32 | padding u32
//!   linear: rank u8 | dims u32 ... | has quantizer u8
//!           weights: shared quantized layer -> i8 codes W̃_h, s_h f32, z_h i32
//!                    otherwise              -> f32 values
//!           bias f32 ...
//!           quantized: act count u8 | (bit u8, scale f32, zero i32) ...
//!                      unshared: scale count u8 | (bit u8, scale f32) ...
//!   norm:   features u32 | gamma f32 ... | beta f32 ...
//!           entry count u16 | (producer u8, consumer u8, momentum f32, mean f32 ..., var f32 ...) ...
//! ```
//!
//! A shared checkpoint stores only the `h`-bit integer codes of quantized
//! layers; loading restores `W = W̃_h · s_h`, from which every precision's
//! codes are re-derived exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Layer, LayerKind, LayerSpec, Network, NormKey, NormStats, FLOAT_BITS};
use crate::quantizer::{quantize_weight_high, ActQuant, QuantParams};
use crate::report::write_atomic;

pub const MAGIC: &[u8; 4] = b"DRQ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    Shared = 0,
    Unshared = 1,
}

impl CheckpointMode {
    /// Shared when every quantizer uses a shared weight scale.
    pub fn of(net: &Network) -> Self {
        let all_shared = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(lin) => lin.quant.as_ref(),
                _ => None,
            })
            .all(|q| q.shared_weight_scale);
        let any_quant = net
            .layers()
            .iter()
            .any(|l| matches!(l, Layer::Linear(lin) if lin.quant.is_some()));
        if any_quant && all_shared {
            CheckpointMode::Shared
        } else {
            CheckpointMode::Unshared
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.f32(x));
    }
    fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err(format!("{what}: length overflow")))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn err(&self, message: String) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message,
        }
    }
}

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::FullyConnected => 0,
        LayerKind::Conv2d { .. } => 1,
        LayerKind::Relu => 2,
        LayerKind::Flatten => 3,
        LayerKind::BatchNorm => 4,
    }
}

/// Serializes `net`; the mode follows the network's quantizers.
pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let mode = CheckpointMode::of(net);
    let h = net
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::Linear(lin) => lin.quant.as_ref().map(|q| q.h),
            _ => None,
        })
        .unwrap_or(FLOAT_BITS);
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u8(mode as u8);
    w.u8(h);
    w.len_u32(net.layers().len(), "layer count")?;
    let input = net.input_shape();
    w.u8(u8::try_from(input.len()).map_err(|_| Error::InvalidArgument("input rank exceeds 255".into()))?);
    for &d in input {
        w.len_u32(d, "input dimension")?;
    }
    for (i, (layer, spec)) in net.layers().iter().zip(net.specs()).enumerate() {
        let name = format!("layer{i}");
        w.u16(name.len() as u16);
        w.buf.extend_from_slice(name.as_bytes());
        w.u8(kind_code(spec.kind));
        w.len_u32(spec.fan_in, "fan_in")?;
        w.len_u32(spec.fan_out, "fan_out")?;
        w.u8(u8::from(spec.quantized));
        if let LayerKind::Conv2d { kernel, padding } = spec.kind {
            w.len_u32(kernel, "kernel")?;
            w.len_u32(padding, "padding")?;
        }
        match layer {
            Layer::Linear(lin) => {
                let shape = lin.weight.shape();
                w.u8(shape.len() as u8);
                for &d in shape {
                    w.len_u32(d, "weight dimension")?;
                }
                w.u8(u8::from(lin.quant.is_some()));
                match (&lin.quant, mode) {
                    (Some(q), CheckpointMode::Shared) => {
                        let codes = quantize_weight_high(&lin.weight, q)?;
                        for v in codes.values {
                            w.buf.push(v as i8 as u8);
                        }
                        w.f32(q.s_h);
                        w.i32(q.z_h);
                    }
                    _ => w.f32s(lin.weight.data()),
                }
                w.f32s(&lin.bias);
                if let Some(q) = &lin.quant {
                    w.u8(q.act.len() as u8);
                    for (&b, a) in &q.act {
                        w.u8(b);
                        w.f32(a.scale);
                        w.i32(a.zero_point);
                    }
                    if mode == CheckpointMode::Unshared {
                        let scales: BTreeMap<u8, f32> = if q.shared_weight_scale {
                            BTreeMap::from([(q.h, q.s_h)])
                        } else {
                            q.unshared_scales.clone()
                        };
                        w.u8(u8::from(q.shared_weight_scale));
                        w.f32(q.s_h);
                        w.i32(q.z_h);
                        w.u8(scales.len() as u8);
                        for (b, s) in scales {
                            w.u8(b);
                            w.f32(s);
                        }
                    }
                }
            }
            Layer::Norm(n) => {
                w.len_u32(n.gamma.len(), "features")?;
                w.f32s(&n.gamma);
                w.f32s(&n.beta);
                w.u16(u16::try_from(n.stats.len()).map_err(|_| Error::InvalidArgument("too many norm entries".into()))?);
                for (k, s) in &n.stats {
                    w.u8(k.producer);
                    w.u8(k.consumer);
                    w.f32(s.momentum);
                    w.f32s(&s.mean);
                    w.f32s(&s.var);
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
    }
    Ok(w.buf)
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"DRQ1\""),
        });
    }
    let mode = match r.u8("mode")? {
        0 => CheckpointMode::Shared,
        1 => CheckpointMode::Unshared,
        m => return Err(r.err(format!("unknown mode byte {m}"))),
    };
    let h = r.u8("highest bit-width")?;
    let count = r.usize("layer count")?;
    let rank = r.u8("input rank")? as usize;
    let input: Vec<usize> = (0..rank).map(|_| r.usize("input dimension")).collect::<Result<_>>()?;

    enum Payload {
        Linear {
            weights: Vec<f32>,
            bias: Vec<f32>,
            quant: Option<QuantParams>,
        },
        Norm {
            gamma: Vec<f32>,
            beta: Vec<f32>,
            stats: BTreeMap<NormKey, NormStats>,
        },
        Empty,
    }

    let mut specs = Vec::with_capacity(count.min(1 << 16));
    let mut payloads = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16("layer name length")? as usize;
        let name = r.take(name_len, "layer name")?;
        std::str::from_utf8(name).map_err(|_| r.err("layer name is not UTF-8".into()))?;
        let kind_byte = r.u8("layer kind")?;
        let fan_in = r.usize("fan_in")?;
        let fan_out = r.usize("fan_out")?;
        let quantized = match r.u8("quantized flag")? {
            0 => false,
            1 => true,
            v => return Err(r.err(format!("invalid quantized flag {v}"))),
        };
        let kind = match kind_byte {
            0 => LayerKind::FullyConnected,
            1 => {
                let kernel = r.usize("kernel")?;
                let padding = r.usize("padding")?;
                LayerKind::Conv2d { kernel, padding }
            }
            2 => LayerKind::Relu,
            3 => LayerKind::Flatten,
            4 => LayerKind::BatchNorm,
            k => return Err(r.err(format!("unknown layer kind {k}"))),
        };
        specs.push(LayerSpec {
            kind,
            fan_in,
            fan_out,
            quantized,
        });
        let payload = match kind {
            LayerKind::FullyConnected | LayerKind::Conv2d { .. } => {
                let wrank = r.u8("weight rank")? as usize;
                let shape: Vec<usize> = (0..wrank).map(|_| r.usize("weight dimension")).collect::<Result<_>>()?;
                let n = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| r.err("weight size overflow".into()))?;
                let has_quant = r.u8("quantizer flag")? == 1;
                let (weights, shared_scale) = if has_quant && mode == CheckpointMode::Shared {
                    let codes = r.take(n, "integer weights")?.to_vec();
                    let s_h = r.f32("s_h")?;
                    let z_h = r.i32("z_h")?;
                    let w = codes.iter().map(|&c| f32::from(c as i8) * s_h).collect();
                    (w, Some((s_h, z_h)))
                } else {
                    (r.f32s(n, "weights")?, None)
                };
                let bias = r.f32s(fan_out, "bias")?;
                let quant = if has_quant {
                    let acts = r.u8("activation entry count")?;
                    let mut act = BTreeMap::new();
                    for _ in 0..acts {
                        let b = r.u8("activation bit")?;
                        let scale = r.f32("activation scale")?;
                        let zero_point = r.i32("activation zero-point")?;
                        act.insert(b, ActQuant { scale, zero_point });
                    }
                    let qp = match shared_scale {
                        Some((s_h, z_h)) => QuantParams {
                            h,
                            s_h,
                            z_h,
                            act,
                            shared_weight_scale: true,
                            unshared_scales: BTreeMap::new(),
                        },
                        None => {
                            let shared = r.u8("scale sharing flag")? == 1;
                            let s_h = r.f32("s_h")?;
                            let z_h = r.i32("z_h")?;
                            let k = r.u8("weight scale count")?;
                            let mut scales = BTreeMap::new();
                            for _ in 0..k {
                                let b = r.u8("weight scale bit")?;
                                scales.insert(b, r.f32("weight scale")?);
                            }
                            QuantParams {
                                h,
                                s_h,
                                z_h,
                                act,
                                shared_weight_scale: shared,
                                unshared_scales: if shared { BTreeMap::new() } else { scales },
                            }
                        }
                    };
                    Some(qp)
                } else {
                    None
                };
                Payload::Linear { weights, bias, quant }
            }
            LayerKind::BatchNorm => {
                let f = r.usize("features")?;
                let gamma = r.f32s(f, "gamma")?;
                let beta = r.f32s(f, "beta")?;
                let entries = r.u16("norm entry count")?;
                let mut stats = BTreeMap::new();
                for _ in 0..entries {
                    let producer = r.u8("norm producer bit")?;
                    let consumer = r.u8("norm consumer bit")?;
                    let momentum = r.f32("norm momentum")?;
                    let mean = r.f32s(f, "norm mean")?;
                    let var = r.f32s(f, "norm variance")?;
                    stats.insert(NormKey::new(producer, consumer), NormStats { mean, var, momentum });
                }
                Payload::Norm { gamma, beta, stats }
            }
            LayerKind::Relu | LayerKind::Flatten => Payload::Empty,
        };
        payloads.push(payload);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut net = Network::new(&input, &specs, 0).map_err(|e| Error::Checkpoint {
        offset: 0,
        message: format!("invalid architecture: {e}"),
    })?;
    for (i, (layer, payload)) in net.layers_mut().iter_mut().zip(payloads).enumerate() {
        match (layer, payload) {
            (Layer::Linear(lin), Payload::Linear { weights, bias, quant }) => {
                if weights.len() != lin.weight.len() || bias.len() != lin.bias.len() {
                    return Err(Error::Checkpoint {
                        offset: 0,
                        message: format!("layer {i}: parameter sizes do not match the architecture"),
                    });
                }
                lin.weight.data_mut().copy_from_slice(&weights);
                lin.bias = bias;
                lin.quant = quant;
            }
            (Layer::Norm(n), Payload::Norm { gamma, beta, stats }) => {
                n.gamma = gamma;
                n.beta = beta;
                n.stats = stats;
            }
            (Layer::Relu | Layer::Flatten, Payload::Empty) => {}
            _ => unreachable!("payload kind follows the decoded layer kind"),
        }
    }
    Ok(net)
}

pub fn store_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &encode(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_is_rejected() {
        let err = decode(b"DRQ2\x00\x08\x00\x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let err = decode(b"DRQ1\x00\x08\x01\x00").unwrap_err();
        match err {
            Error::Checkpoint { offset, .. } => assert_eq!(offset, 6),
            e => panic!("unexpected {e}"),
        }
    }
}
