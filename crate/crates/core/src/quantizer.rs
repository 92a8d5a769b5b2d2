//! Double Rounding weight quantization, per-precision activation quantization
//! and the straight-through gradient rules for scales and zero-points.
//!
//! Weights are quantized once to the highest bit-width `h` with a single
//! shared scale. Every lower precision `l` is derived from those `h`-bit
//! integers alone by a rounding right-shift of `Δ = h - l` bits, so the
//! dequantization step of precision `l` is exactly `s_h · 2^Δ`.
//!
//! Rounding is half-away-from-zero in both stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Candidate bit-widths, strictly decreasing. The first element is the
/// highest precision `h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitWidthSet {
    bits: Vec<u8>,
}

impl BitWidthSet {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::BitWidthSet("empty set".into()));
        }
        if let Some(&b) = bits.iter().find(|&&b| !(MIN_BITS..=MAX_BITS).contains(&b)) {
            return Err(Error::BitWidthSet(format!(
                "bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        if bits.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::BitWidthSet(format!(
                "{bits:?} is not strictly decreasing"
            )));
        }
        Ok(Self { bits })
    }

    /// Builds a set from bit-widths in any order.
    pub fn from_unordered(mut bits: Vec<u8>) -> Result<Self> {
        bits.sort_unstable_by(|a, b| b.cmp(a));
        let before = bits.len();
        bits.dedup();
        if bits.len() != before {
            return Err(Error::BitWidthSet("duplicate bit-widths".into()));
        }
        Self::new(bits)
    }

    pub fn highest(&self) -> u8 {
        self.bits[0]
    }

    pub fn lowest(&self) -> u8 {
        self.bits[self.bits.len() - 1]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, b: u8) -> bool {
        self.bits.contains(&b)
    }

    pub fn check(&self, b: u8) -> Result<()> {
        if self.contains(b) {
            Ok(())
        } else {
            Err(Error::UnknownBitWidth {
                bits: b,
                set: self.bits.clone(),
            })
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.bits.iter().copied()
    }
}

impl TryFrom<Vec<u8>> for BitWidthSet {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BitWidthSet> for Vec<u8> {
    fn from(set: BitWidthSet) -> Self {
        set.bits
    }
}

/// Signed integer range `[-2^(b-1), 2^(b-1) - 1]`.
pub fn signed_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Unsigned integer range `[0, 2^b - 1]`.
pub fn unsigned_range(bits: u8) -> (i32, i32) {
    (0, (1i32 << bits) - 1)
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

/// Integer division by `2^shift` rounded half away from zero.
#[inline]
pub fn shift_round(x: i32, shift: u32) -> i32 {
    if shift == 0 {
        return x;
    }
    let half = 1i32 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

/// Activation quantizer state for one precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub scale: f32,
    pub zero_point: i32,
}

/// Per-layer quantization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// Highest bit-width.
    pub h: u8,
    /// Shared weight scale `s_h`.
    pub s_h: f32,
    /// Weight zero-point, always 0 (symmetric).
    pub z_h: i32,
    pub act: BTreeMap<u8, ActQuant>,
    /// `true`: every precision derives from the `h`-bit integers.
    /// `false`: each precision keeps its own weight scale in `unshared_scales`.
    pub shared_weight_scale: bool,
    pub unshared_scales: BTreeMap<u8, f32>,
}

impl QuantParams {
    /// Shared-scale parameters with activation scales set to `act_scale` for
    /// every precision in `set`.
    pub fn shared(set: &BitWidthSet, s_h: f32, act_scales: &BTreeMap<u8, f32>) -> Result<Self> {
        let qp = Self {
            h: set.highest(),
            s_h,
            z_h: 0,
            act: set
                .iter()
                .map(|b| {
                    let scale = act_scales.get(&b).copied().unwrap_or(1.0);
                    (b, ActQuant { scale, zero_point: 0 })
                })
                .collect(),
            shared_weight_scale: true,
            unshared_scales: BTreeMap::new(),
        };
        qp.validate(set)?;
        Ok(qp)
    }

    pub fn validate(&self, set: &BitWidthSet) -> Result<()> {
        if self.h != set.highest() {
            return Err(Error::BitWidthSet(format!(
                "quant params have h={} but the set's highest bit is {}",
                self.h,
                set.highest()
            )));
        }
        check_scale("weight scale s_h", self.s_h)?;
        if self.z_h != 0 {
            return Err(Error::InvalidArgument(format!(
                "weight zero-point must be 0, got {}",
                self.z_h
            )));
        }
        for b in set.iter() {
            let a = self.act.get(&b).ok_or_else(|| {
                Error::InvalidArgument(format!("missing activation scale for {b}-bit"))
            })?;
            check_scale(&format!("{b}-bit activation scale"), a.scale)?;
            if !self.shared_weight_scale {
                let s = self.unshared_scales.get(&b).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("missing unshared weight scale for {b}-bit"))
                })?;
                check_scale(&format!("{b}-bit weight scale"), s)?;
            }
        }
        Ok(())
    }

    pub fn act_for(&self, b: u8) -> Result<ActQuant> {
        self.act.get(&b).copied().ok_or_else(|| Error::UnknownBitWidth {
            bits: b,
            set: self.act.keys().copied().collect(),
        })
    }
}

fn check_scale(what: &str, scale: f32) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveScale {
            what: what.into(),
            scale,
        })
    }
}

/// Integer codes at a given bit-width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub bits: u8,
    pub signed: bool,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, bits: u8, signed: bool) -> Result<Self> {
        let t = Self {
            shape,
            values,
            bits,
            signed,
        };
        let (lo, hi) = t.range();
        if let Some(v) = t.values.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::InvalidArgument(format!(
                "code {v} outside the {bits}-bit range [{lo}, {hi}]"
            )));
        }
        Ok(t)
    }

    pub fn range(&self) -> (i32, i32) {
        if self.signed {
            signed_range(self.bits)
        } else {
            unsigned_range(self.bits)
        }
    }
}

/// `W̃_h = clip(round((W - z_h) / s_h), -2^(h-1), 2^(h-1) - 1)`.
pub fn quantize_weight_high(w: &DenseTensor, qp: &QuantParams) -> Result<QuantizedTensor> {
    check_scale("weight scale s_h", qp.s_h)?;
    let (lo, hi) = signed_range(qp.h);
    let z = qp.z_h as f32;
    let values = w
        .data()
        .iter()
        .map(|&x| (round_half_away((x - z) / qp.s_h) as i32).clamp(lo, hi))
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        values,
        bits: qp.h,
        signed: true,
    })
}

/// `W̃_l = clip(round(W̃_h / 2^Δ), -2^(l-1), 2^(l-1) - 1)`, by integer shift.
pub fn double_round_low(wh: &QuantizedTensor, l: u8) -> Result<QuantizedTensor> {
    let delta = low_delta(wh.bits, l)?;
    let (lo, hi) = signed_range(l);
    let values = wh
        .values
        .iter()
        .map(|&x| shift_round(x, delta).clamp(lo, hi))
        .collect();
    Ok(QuantizedTensor {
        shape: wh.shape.clone(),
        values,
        bits: l,
        signed: true,
    })
}

/// Same map as [`double_round_low`] computed through float division and rounding.
pub fn double_round_low_float(wh: &QuantizedTensor, l: u8) -> Result<QuantizedTensor> {
    let delta = low_delta(wh.bits, l)?;
    let (lo, hi) = signed_range(l);
    let div = (1u32 << delta) as f64;
    let values = wh
        .values
        .iter()
        .map(|&x| ((f64::from(x) / div).round() as i32).clamp(lo, hi))
        .collect();
    Ok(QuantizedTensor {
        shape: wh.shape.clone(),
        values,
        bits: l,
        signed: true,
    })
}

fn low_delta(h: u8, l: u8) -> Result<u32> {
    if l > h {
        return Err(Error::InvalidArgument(format!(
            "target bit-width {l} exceeds the stored bit-width {h}"
        )));
    }
    if l < MIN_BITS {
        return Err(Error::InvalidArgument(format!("bit-width {l} below {MIN_BITS}")));
    }
    Ok(u32::from(h - l))
}

/// Dequantization step of precision `l` in shared mode: `s_h · 2^(h-l)`.
pub fn low_step(s_h: f32, h: u8, l: u8) -> f32 {
    s_h * (1u32 << (h - l)) as f32
}

/// `Ŵ_l = W̃_l · s_h · 2^Δ + z_h`.
pub fn dequantize_low(wl: &QuantizedTensor, qp: &QuantParams) -> Result<DenseTensor> {
    if wl.bits > qp.h {
        return Err(Error::InvalidArgument(format!(
            "{}-bit codes exceed h={}",
            wl.bits, qp.h
        )));
    }
    let step = low_step(qp.s_h, qp.h, wl.bits);
    let z = qp.z_h as f32;
    DenseTensor::new(
        wl.shape.clone(),
        wl.values.iter().map(|&q| q as f32 * step + z).collect(),
    )
}

/// `X̃_b = clip(round((X - z_b) / s_b), 0, 2^b - 1)`, `X̂_b = X̃_b · s_b + z_b`.
pub fn quantize_activation(
    x: &DenseTensor,
    b: u8,
    scale: f32,
    zero_point: i32,
) -> Result<(QuantizedTensor, DenseTensor)> {
    check_scale(&format!("{b}-bit activation scale"), scale)?;
    let (lo, hi) = unsigned_range(b);
    let z = zero_point as f32;
    let values: Vec<i32> = x
        .data()
        .iter()
        .map(|&v| (round_half_away((v - z) / scale) as i32).clamp(lo, hi))
        .collect();
    let deq = values.iter().map(|&q| q as f32 * scale + z).collect();
    Ok((
        QuantizedTensor {
            shape: x.shape().to_vec(),
            values,
            bits: b,
            signed: false,
        },
        DenseTensor::new(x.shape().to_vec(), deq)?,
    ))
}

/// General uniform quantizer: `W̃ = clip(round(W / s) + z, -2^(b-1), 2^(b-1) - 1)`,
/// `Ŵ = (W̃ - z) · s`. Used for unshared per-precision weight scales.
pub fn uniform_quantize(
    w: &DenseTensor,
    b: u8,
    scale: f32,
    zero_point: i32,
) -> Result<(QuantizedTensor, DenseTensor)> {
    check_scale(&format!("{b}-bit weight scale"), scale)?;
    let (lo, hi) = signed_range(b);
    let values: Vec<i32> = w
        .data()
        .iter()
        .map(|&v| (round_half_away(v / scale) as i32 + zero_point).clamp(lo, hi))
        .collect();
    let deq = values
        .iter()
        .map(|&q| (q - zero_point) as f32 * scale)
        .collect();
    Ok((
        QuantizedTensor {
            shape: w.shape().to_vec(),
            values,
            bits: b,
            signed: true,
        },
        DenseTensor::new(w.shape().to_vec(), deq)?,
    ))
}

/// Per-element straight-through derivative of the dequantized value with
/// respect to its scale: `round(v) - v` strictly inside `(n, p)`, else the
/// saturating bound.
#[inline]
pub fn ste_scale_coeff(v: f32, rounded: f32, n: f32, p: f32) -> f32 {
    if v <= n {
        n
    } else if v >= p {
        p
    } else {
        rounded - v
    }
}

#[inline]
fn inside(v: f32, n: f32, p: f32) -> bool {
    n < v && v < p
}

/// Scale gradient `Σ upstream · ∂Ŷ/∂s` with `v = (Y - z) / s`.
pub fn ste_scale_grad(y: &[f32], s: f32, z: f32, n: i32, p: i32, upstream: &[f32]) -> f32 {
    debug_assert_eq!(y.len(), upstream.len());
    let (n, p) = (n as f32, p as f32);
    y.iter()
        .zip(upstream)
        .map(|(&yv, &g)| {
            let v = (yv - z) / s;
            g * ste_scale_coeff(v, round_half_away(v), n, p)
        })
        .sum()
}

/// Zero-point gradient: 0 inside the clip range, 1 outside.
pub fn ste_zeropoint_grad(y: &[f32], s: f32, z: f32, n: i32, p: i32, upstream: &[f32]) -> f32 {
    debug_assert_eq!(y.len(), upstream.len());
    let (n, p) = (n as f32, p as f32);
    y.iter()
        .zip(upstream)
        .filter(|(&yv, _)| !inside((yv - z) / s, n, p))
        .map(|(_, &g)| g)
        .sum()
}

/// Clip mask for a tensor: `true` where the element lies strictly inside `(n, p)`.
pub fn clip_mask(y: &[f32], s: f32, z: f32, n: i32, p: i32) -> Vec<bool> {
    let (n, p) = (n as f32, p as f32);
    y.iter().map(|&yv| inside((yv - z) / s, n, p)).collect()
}

/// Straight-through input gradient: upstream where unclipped, zero elsewhere.
pub fn ste_weight_grad_passthrough(upstream: &DenseTensor, mask: &[bool]) -> Result<DenseTensor> {
    if mask.len() != upstream.len() {
        return Err(Error::dim("clip mask", &[upstream.len()], &[mask.len()]));
    }
    let data = upstream
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    DenseTensor::new(upstream.shape().to_vec(), data)
}

/// Fake-quantized tensor with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct FakeQuant {
    pub dequant: Vec<f32>,
    /// Pass-through mask for the input gradient.
    pub mask: Vec<bool>,
    /// Per-element `∂Ŷ/∂s` for the scale that owns this quantization.
    pub dscale: Vec<f32>,
}

impl FakeQuant {
    pub fn scale_grad(&self, upstream: &[f32]) -> f32 {
        self.dscale.iter().zip(upstream).map(|(a, b)| a * b).sum()
    }

    pub fn input_grad(&self, upstream: &[f32]) -> Vec<f32> {
        upstream
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect()
    }
}

/// Double Rounding forward for precision `l` with shared scale `s_h`.
///
/// The scale derivative is taken with respect to `s_h`; the effective step at
/// precision `l` is `s_h · 2^Δ`, so the per-element coefficient carries a
/// factor `2^Δ`.
pub fn fake_quant_weight_shared(w: &[f32], s_h: f32, h: u8, l: u8) -> Result<FakeQuant> {
    check_scale("weight scale s_h", s_h)?;
    let delta = low_delta(h, l)?;
    let (hlo, hhi) = signed_range(h);
    let (lo, hi) = signed_range(l);
    let factor = (1u32 << delta) as f32;
    let step = s_h * factor;
    let (nf, pf) = (lo as f32, hi as f32);
    let mut out = FakeQuant {
        dequant: Vec::with_capacity(w.len()),
        mask: Vec::with_capacity(w.len()),
        dscale: Vec::with_capacity(w.len()),
    };
    for &x in w {
        let high = (round_half_away(x / s_h) as i32).clamp(hlo, hhi);
        let code = shift_round(high, delta).clamp(lo, hi);
        let v = x / step;
        out.dequant.push(code as f32 * step);
        out.mask.push(inside(v, nf, pf));
        out.dscale.push(factor * ste_scale_coeff(v, code as f32, nf, pf));
    }
    Ok(out)
}

/// Single-scale signed uniform quantization (unshared weight scales).
pub fn fake_quant_weight_uniform(w: &[f32], scale: f32, b: u8) -> Result<FakeQuant> {
    check_scale(&format!("{b}-bit weight scale"), scale)?;
    let (lo, hi) = signed_range(b);
    Ok(fake_quant_with(w, scale, lo, hi))
}

/// Unsigned activation quantization with zero-point 0.
pub fn fake_quant_activation(x: &[f32], scale: f32, b: u8) -> Result<FakeQuant> {
    check_scale(&format!("{b}-bit activation scale"), scale)?;
    let (lo, hi) = unsigned_range(b);
    Ok(fake_quant_with(x, scale, lo, hi))
}

fn fake_quant_with(x: &[f32], scale: f32, lo: i32, hi: i32) -> FakeQuant {
    let (nf, pf) = (lo as f32, hi as f32);
    let mut out = FakeQuant {
        dequant: Vec::with_capacity(x.len()),
        mask: Vec::with_capacity(x.len()),
        dscale: Vec::with_capacity(x.len()),
    };
    for &xv in x {
        let v = xv / scale;
        let code = (round_half_away(v) as i32).clamp(lo, hi);
        out.dequant.push(code as f32 * scale);
        out.mask.push(inside(v, nf, pf));
        out.dscale.push(ste_scale_coeff(v, code as f32, nf, pf));
    }
    out
}

/// LSQ-style initial weight scale `2 · mean|W| / sqrt(2^(b-1) - 1)`.
pub fn init_weight_scale(w: &[f32], bits: u8) -> f32 {
    let mean_abs = w.iter().map(|x| f64::from(x.abs())).sum::<f64>() / w.len().max(1) as f64;
    let denom = (f64::from((1u32 << (bits - 1)) - 1)).sqrt();
    let s = (2.0 * mean_abs / denom) as f32;
    if s > 0.0 {
        s
    } else {
        1e-3
    }
}

/// Initial activation scale from a calibration maximum: `max / (2^b - 1)`.
pub fn init_act_scale(max: f32, bits: u8) -> f32 {
    let s = max / ((1u32 << bits) - 1) as f32;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1e-3
    }
}
