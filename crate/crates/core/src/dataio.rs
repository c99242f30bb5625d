//! Dataset ingestion, checkpoint persistence, and report emission.
//!
//! Datasets come from either the big-endian IDX binary format (what MNIST is
//! distributed in) or a seeded synthetic generator, so the whole test suite
//! runs without downloads. Checkpoints are versioned, self-describing JSON:
//! field names rather than positions, integers exact, reals at round-trip
//! precision. Reports are CSV or JSON-lines with a fixed column set.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::IntRange;
use crate::trainkit::{ModelConfig, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// IDX tensors
// ---------------------------------------------------------------------------

/// Raw tensor parsed from an IDX file (unsigned-byte payload).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::IdxTruncated {
                expected,
                got: data.len(),
            });
        }
        Ok(IdxTensor { shape, data })
    }

    /// Serialize in IDX layout: magic `[0, 0, 0x08, rank]`, big-endian u32
    /// dimension sizes, then the row-major payload.
    pub fn to_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + self.data.len());
        out.extend_from_slice(&[0, 0, 0x08, self.shape.len() as u8]);
        for &dim in &self.shape {
            out.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Parse an IDX byte stream. Only the unsigned-byte dtype (code 0x08) is
/// supported; bad magic, unsupported dtypes, and truncated payloads are
/// distinct errors.
pub fn read_idx_bytes(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        let mut magic = [0u8; 4];
        magic[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::IdxBadMagic(magic));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::IdxBadMagic(magic));
    }
    if magic[2] != 0x08 {
        return Err(Error::IdxUnsupportedDtype(magic[2]));
    }
    let rank = magic[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::IdxTruncated {
            expected: header_len,
            got: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 4 + 4 * i;
        shape.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            got: payload.len(),
        });
    }
    Ok(IdxTensor {
        shape,
        data: payload[..expected].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_idx_bytes(&bytes)
}

pub fn write_idx(path: impl AsRef<Path>, tensor: &IdxTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_idx_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Integer-coded samples plus their declared range. Labels are class indices
/// in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<i64>,
    pub range: IntRange,
    pub labels: Vec<u32>,
    pub num_classes: u32,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Array2<i64>,
        range: IntRange,
        labels: Vec<u32>,
        num_classes: u32,
        split: Split,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows vs {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|v| !range.contains(**v)) {
            return Err(Error::InvalidParam(format!(
                "input value {bad} outside declared range [{}, {}]",
                range.min(),
                range.max()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs,
            range,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Filter a raw `[n, rows, cols]` image tensor down to two classes, flatten,
/// and binarize at `threshold` on `[0, 1]`-normalized pixels: `pixel / 255 >=
/// threshold` maps to 1. The output range is 1-bit unsigned and labels are 0
/// for `classes.0`, 1 for `classes.1`.
pub fn binarize_mnist(
    images: &IdxTensor,
    labels: &IdxTensor,
    classes: (u32, u32),
    threshold: f64,
    split: Split,
) -> Result<Dataset> {
    if images.shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [n, rows, cols] images, got rank {}",
            images.shape.len()
        )));
    }
    if labels.shape.len() != 1 || labels.shape[0] != images.shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs label shape {:?}",
            images.shape[0], labels.shape
        )));
    }
    let pixels_per_image = images.shape[1] * images.shape[2];
    let mut rows: Vec<i64> = Vec::new();
    let mut out_labels: Vec<u32> = Vec::new();
    let mut seen = (false, false);
    for (i, &label) in labels.data.iter().enumerate() {
        let label = label as u32;
        let class = if label == classes.0 {
            seen.0 = true;
            0
        } else if label == classes.1 {
            seen.1 = true;
            1
        } else {
            continue;
        };
        let img = &images.data[i * pixels_per_image..(i + 1) * pixels_per_image];
        rows.extend(
            img.iter()
                .map(|&px| (px as f64 / 255.0 >= threshold) as i64),
        );
        out_labels.push(class);
    }
    if !seen.0 {
        return Err(Error::MissingClass(classes.0));
    }
    if !seen.1 {
        return Err(Error::MissingClass(classes.1));
    }
    let inputs = Array2::from_shape_vec((out_labels.len(), pixels_per_image), rows)
        .expect("row count matches label count");
    Dataset::new(inputs, IntRange::new(1, false)?, out_labels, 2, split)
}

/// Standard MNIST file names for one split.
pub fn mnist_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Load one binarized two-class MNIST split from a directory of raw IDX
/// files.
pub fn load_mnist_split(
    dir: impl AsRef<Path>,
    split: Split,
    classes: (u32, u32),
    threshold: f64,
) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (images_name, labels_name) = mnist_file_names(split);
    let images = read_idx(dir.join(images_name))?;
    let labels = read_idx(dir.join(labels_name))?;
    binarize_mnist(&images, &labels, classes, threshold, split)
}

/// Seeded linearly separable integer dataset: one random prototype per class,
/// samples are prototypes with bounded integer noise, re-clipped to range.
/// Prototypes depend only on `seed`, so train and test splits built from the
/// same seed share them; the noise stream differs per split.
#[allow(clippy::too_many_arguments)]
pub fn synth_dataset(
    k: usize,
    n_bits: u32,
    signed: bool,
    num_samples: usize,
    num_classes: u32,
    noise: i64,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 || num_samples == 0 || num_classes == 0 {
        return Err(Error::InvalidParam(
            "k, num_samples, num_classes must be >= 1".into(),
        ));
    }
    if noise < 0 {
        return Err(Error::InvalidParam("noise must be >= 0".into()));
    }
    let range = IntRange::new(n_bits, signed)?;
    let (lo, hi) = (range.min(), range.max());

    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = Array2::from_shape_fn((num_classes as usize, k), |_| {
        proto_rng.random_range(lo..=hi)
    });

    let split_salt = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt);
    let mut inputs = Array2::zeros((num_samples, k));
    let mut labels = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let class = (s as u32) % num_classes;
        labels.push(class);
        for j in 0..k {
            let base = prototypes[[class as usize, j]];
            let jitter = if noise == 0 {
                0
            } else {
                noise_rng.random_range(-noise..=noise)
            };
            inputs[[s, j]] = (base + jitter).clamp(lo, hi);
        }
    }
    Dataset::new(inputs, range, labels, num_classes, split)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Per-layer parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerState {
    Baseline {
        weights: Vec<Vec<f64>>,
        log2_scales: Vec<f64>,
        bias: Vec<f64>,
        weight_bits: u32,
    },
    A2q {
        v: Vec<Vec<f64>>,
        t: Vec<f64>,
        d: Vec<f64>,
        bias: Vec<f64>,
        weight_bits: u32,
        acc_bits: u32,
        input_bits: u32,
        input_signed: bool,
    },
}

/// Serialized model + configs. JSON with named fields; integer fields are
/// exact and floats round-trip bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub input_bits: u32,
    pub input_signed: bool,
    pub layers: Vec<LayerState>,
    /// Frozen running-max statistic per hidden activation site.
    pub activation_running_max: Vec<f64>,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(checkpoint)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_str(&json).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            ck.format_version
        )));
    }
    Ok(ck)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(ReportFormat::JsonLines),
            other => Err(Error::InvalidParam(format!(
                "unknown report format '{other}'"
            ))),
        }
    }
}

/// One report row; the fixed column set shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "P")]
    pub p: u32,
    pub mode: String,
    pub overflow_events: u64,
    pub total_macs: u64,
    pub dot_products_with_overflow: u64,
    pub total_dot_products: u64,
    pub logit_mae: f64,
    pub top1_accuracy: f64,
    pub sparsity: f64,
}

pub const REPORT_CSV_HEADER: &str = "P,mode,overflow_events,total_macs,dot_products_with_overflow,total_dot_products,logit_mae,top1_accuracy,sparsity";

pub fn report_to_string(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(REPORT_CSV_HEADER);
            out.push('\n');
            for r in rows {
                // f64 Display is the shortest round-trip representation
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.p,
                    r.mode,
                    r.overflow_events,
                    r.total_macs,
                    r.dot_products_with_overflow,
                    r.total_dot_products,
                    r.logit_mae,
                    r.top1_accuracy,
                    r.sparsity
                ));
            }
        }
        ReportFormat::JsonLines => {
            for r in rows {
                out.push_str(
                    &serde_json::to_string(r)
                        .map_err(|e| Error::CheckpointFormat(e.to_string()))?,
                );
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Write rows to `path`; an empty slice still produces the CSV header.
pub fn write_report(
    rows: &[ReportRow],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let text = report_to_string(rows, format)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parse a CSV report produced by [`write_report`]; used by round-trip tests
/// and the repro tooling.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == REPORT_CSV_HEADER => {}
        other => {
            return Err(Error::CheckpointFormat(format!(
                "bad report header: {other:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::CheckpointFormat(format!("bad report row: {line}")));
        }
        let parse_err = |what: &str| Error::CheckpointFormat(format!("bad {what} in row: {line}"));
        rows.push(ReportRow {
            p: fields[0].parse().map_err(|_| parse_err("P"))?,
            mode: fields[1].to_string(),
            overflow_events: fields[2]
                .parse()
                .map_err(|_| parse_err("overflow_events"))?,
            total_macs: fields[3].parse().map_err(|_| parse_err("total_macs"))?,
            dot_products_with_overflow: fields[4]
                .parse()
                .map_err(|_| parse_err("dot_products_with_overflow"))?,
            total_dot_products: fields[5]
                .parse()
                .map_err(|_| parse_err("total_dot_products"))?,
            logit_mae: fields[6].parse().map_err(|_| parse_err("logit_mae"))?,
            top1_accuracy: fields[7].parse().map_err(|_| parse_err("top1_accuracy"))?,
            sparsity: fields[8].parse().map_err(|_| parse_err("sparsity"))?,
        });
    }
    Ok(rows)
}
