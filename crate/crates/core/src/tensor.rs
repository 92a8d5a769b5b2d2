//! Row-major dense `f32` tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor data", &[expected], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of leading-axis entries (the batch size for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all non-leading dimensions.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn mean_abs(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|&x| f64::from(x.abs())).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Index of the largest element in each row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.row_len();
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// `out[n, o] = sum_i x[n, i] * w[o, i]`, with `w` stored `(out, in)`.
pub(crate) fn matmul_nt(x: &[f32], w: &[f32], batch: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * fan_out];
    for n in 0..batch {
        let xr = &x[n * fan_in..(n + 1) * fan_in];
        let orow = &mut out[n * fan_out..(n + 1) * fan_out];
        for (o, dst) in orow.iter_mut().enumerate() {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            *dst = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `dx[n, i] = sum_o dy[n, o] * w[o, i]`.
pub(crate) fn matmul_nn(dy: &[f32], w: &[f32], batch: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; batch * fan_in];
    for n in 0..batch {
        let dxr = &mut dx[n * fan_in..(n + 1) * fan_in];
        for o in 0..fan_out {
            let g = dy[n * fan_out + o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    }
    dx
}

/// `dw[o, i] = sum_n dy[n, o] * x[n, i]`.
pub(crate) fn matmul_tn(dy: &[f32], x: &[f32], batch: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let mut dw = vec![0.0f32; fan_out * fan_in];
    for n in 0..batch {
        let xr = &x[n * fan_in..(n + 1) * fan_in];
        for o in 0..fan_out {
            let g = dy[n * fan_out + o];
            if g == 0.0 {
                continue;
            }
            let dwr = &mut dw[o * fan_in..(o + 1) * fan_in];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
    dw
}
