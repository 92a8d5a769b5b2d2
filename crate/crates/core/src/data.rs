//! Synthetic datasets, IDX ingestion and mini-batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Isotropic Gaussian clusters around random centres.
    GaussianBlobs {
        classes: usize,
        dims: usize,
        samples: usize,
        /// Standard deviation of the class centres around the origin.
        separation: f32,
        /// Standard deviation of samples around their centre.
        noise: f32,
        seed: u64,
    },
    TwoMoons {
        samples: usize,
        noise: f32,
        seed: u64,
    },
    /// IDX image and label files; the last `eval_fraction` of samples forms
    /// the eval split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        eval_fraction: f32,
        /// Keep images as `(1, rows, cols)` instead of flattening.
        keep_spatial: bool,
    },
}

pub const TRAIN_FRACTION: f32 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseTensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: DenseTensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim("dataset labels", &[x.rows()], &[y.len()]));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let row = self.x.row_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Dataset::new(
            DenseTensor::new(shape, data)?,
            idx.iter().map(|&i| self.y[i]).collect(),
            self.classes,
        )
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Shuffled mini-batches for one epoch. The final short batch is kept.
    pub fn batches(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Dataset>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size).map(|c| self.subset(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load(spec: &DatasetSpec) -> Result<Split> {
    match spec {
        DatasetSpec::GaussianBlobs {
            classes,
            dims,
            samples,
            separation,
            noise,
            seed,
        } => gaussian_blobs(*classes, *dims, *samples, *separation, *noise, *seed),
        DatasetSpec::TwoMoons { samples, noise, seed } => two_moons(*samples, *noise, *seed),
        DatasetSpec::Idx {
            images,
            labels,
            eval_fraction,
            keep_spatial,
        } => idx_dataset(images, labels, *eval_fraction, *keep_spatial),
    }
}

fn normal(rng: &mut impl Rng) -> f32 {
    rng.sample(StandardNormal)
}

fn shuffle_split(x: Vec<f32>, y: Vec<usize>, dims: usize, classes: usize, rng: &mut impl Rng) -> Result<Split> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Dataset("need at least two samples".into()));
    }
    let all = Dataset::new(DenseTensor::new(vec![n, dims], x)?, y, classes)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = ((n as f32 * TRAIN_FRACTION) as usize).clamp(1, n - 1);
    Ok(Split {
        train: all.subset(&order[..n_train])?,
        eval: all.subset(&order[n_train..])?,
    })
}

pub fn gaussian_blobs(classes: usize, dims: usize, samples: usize, separation: f32, noise: f32, seed: u64) -> Result<Split> {
    if classes < 2 || dims == 0 {
        return Err(Error::Dataset("blobs need at least 2 classes and 1 dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dims).map(|_| separation * normal(&mut rng)).collect())
        .collect();
    let mut x = Vec::with_capacity(samples * dims);
    let mut y = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        x.extend(centres[c].iter().map(|&m| m + noise * normal(&mut rng)));
        y.push(c);
    }
    shuffle_split(x, y, dims, classes, &mut rng)
}

pub fn two_moons(samples: usize, noise: f32, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(samples * 2);
    let mut y = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % 2;
        let t: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (px, py) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(px + noise * normal(&mut rng));
        x.push(py + noise * normal(&mut rng));
        y.push(c);
    }
    shuffle_split(x, y, 2, 2, &mut rng)
}

/// Parsed IDX file: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX buffer. Only the unsigned-byte element type (0x08) is supported.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Dataset("IDX header truncated".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset(format!(
            "bad IDX magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Dataset(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Dataset("IDX file declares zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Dataset("IDX dimension table truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(Error::Dataset(format!(
            "IDX payload has {} bytes, header declares {count}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn idx_dataset(images: &Path, labels: &Path, eval_fraction: f32, keep_spatial: bool) -> Result<Split> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
        return Err(Error::Dataset(format!(
            "expected images (N, rows, cols) and labels (N); got {:?} and {:?}",
            img.dims, lab.dims
        )));
    }
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Dataset(format!("eval fraction {eval_fraction} outside [0, 1)")));
    }
    let n = img.dims[0];
    let classes = lab.data.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let shape = if keep_spatial {
        vec![n, 1, img.dims[1], img.dims[2]]
    } else {
        vec![n, img.dims[1] * img.dims[2]]
    };
    let x = DenseTensor::new(shape, img.data.iter().map(|&p| f32::from(p) / 255.0).collect())?;
    let all = Dataset::new(x, lab.data.iter().map(|&l| l as usize).collect(), classes)?;
    let n_eval = ((n as f32 * eval_fraction).round() as usize).min(n.saturating_sub(1));
    let train: Vec<usize> = (0..n - n_eval).collect();
    let eval: Vec<usize> = if n_eval == 0 { train.clone() } else { (n - n_eval..n).collect() };
    Ok(Split {
        train: all.subset(&train)?,
        eval: all.subset(&eval)?,
    })
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f32 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f32 / labels.len() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = gaussian_blobs(3, 4, 60, 3.0, 0.5, 9).unwrap();
        let b = gaussian_blobs(3, 4, 60, 3.0, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = gaussian_blobs(3, 4, 60, 3.0, 0.5, 10).unwrap();
        assert_ne!(a, c);
        assert_eq!(two_moons(50, 0.1, 1).unwrap(), two_moons(50, 0.1, 1).unwrap());
    }

    #[test]
    fn split_sizes() {
        let s = gaussian_blobs(4, 2, 100, 1.0, 0.1, 0).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (80, 20));
        assert_eq!(s.train.sample_shape(), &[2]);
    }

    #[test]
    fn idx_three_dim_u8_header() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        for d in [2u32, 2, 3] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend(0u8..12);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 3]);
        assert_eq!(arr.data.len(), 12);
    }

    #[test]
    fn malformed_idx_is_rejected() {
        assert!(parse_idx(&[0x01, 0x00, 0x08, 0x01, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx(&[0x00, 0x00, 0x0d, 0x01, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx(&[0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 5]).is_err());
        assert!(parse_idx(&[0x00, 0x00]).is_err());
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let s = gaussian_blobs(2, 2, 50, 1.0, 0.1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = s.train.batches(16, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Dataset::len).collect::<Vec<_>>(), vec![16, 16, 8]);
        let total: usize = batches.iter().map(|b| b.y.iter().filter(|&&c| c == 0).count()).sum();
        assert_eq!(total, s.train.y.iter().filter(|&&c| c == 0).count());
    }
}
