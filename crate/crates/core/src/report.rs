//! Run records and their CSV/JSON serializations.
//!
//! Column order is fixed by the field order of each record type.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch, per-precision training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Uniform bit-width, or the sampling label for mixed runs.
    pub precision: String,
    pub loss: f32,
    pub accuracy: f32,
    /// Scale learning rate used for this precision (mean over the epoch).
    pub lr_scale: f32,
}

/// Max-abs scale gradient of one layer for one precision pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGradRecord {
    pub step: u64,
    pub layer: usize,
    pub bit: u8,
    pub max_abs: f32,
}

/// One evaluated subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRecord {
    pub avg_bits: f64,
    pub accuracy: f32,
    pub objective: f64,
    /// Space-separated per-layer bit-widths.
    pub bits: String,
}

/// Realized per-layer bit counts during mixed-precision training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitHistogramRecord {
    pub epoch: usize,
    pub layer: usize,
    pub bit: u8,
    pub count: u64,
}

/// Everything a training run logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricsRecord>,
    pub scale_grads: Vec<ScaleGradRecord>,
    pub bit_histogram: Vec<BitHistogramRecord>,
}

/// Writes `records` as CSV with a header row, even when empty.
pub fn write_csv<T: Serialize>(path: &Path, records: &[T], header: &[&str]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(header)?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &buf)
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "precision", "loss", "accuracy", "lr_scale"];
pub const SCALE_GRADS_HEADER: [&str; 4] = ["step", "layer", "bit", "max_abs"];
pub const PARETO_HEADER: [&str; 4] = ["avg_bits", "accuracy", "objective", "bits"];
pub const BIT_HISTOGRAM_HEADER: [&str; 4] = ["epoch", "layer", "bit", "count"];

/// Writes `metrics.csv`, `scale_grads.csv` and, when non-empty,
/// `bit_histogram.csv` into `dir`.
pub fn write_run_log(dir: &Path, log: &RunLog) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("metrics.csv"), &log.metrics, &METRICS_HEADER)?;
    write_csv(&dir.join("scale_grads.csv"), &log.scale_grads, &SCALE_GRADS_HEADER)?;
    if !log.bit_histogram.is_empty() {
        write_csv(&dir.join("bit_histogram.csv"), &log.bit_histogram, &BIT_HISTOGRAM_HEADER)?;
    }
    Ok(())
}

pub fn write_pareto(path: &Path, records: &[ParetoRecord]) -> Result<()> {
    write_csv(path, records, &PARETO_HEADER)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
