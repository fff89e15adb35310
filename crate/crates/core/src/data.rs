//! MNIST-family datasets from IDX files, plus deterministic batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use muvae_autodiff::{Real, Tensor};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Mnist,
    Fashion,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fashion => "fashion",
        }
    }

    /// Directory holding this dataset's files under the data root.
    pub fn dir(self, data_root: &Path) -> PathBuf {
        data_root.join(self.as_str())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion" => Ok(DatasetId::Fashion),
            other => Err(format!("unknown dataset `{other}` (expected mnist or fashion)")),
        }
    }
}

/// Grayscale 28×28 images with class labels. Pixels are kept as raw bytes
/// and scaled by 1/255 when materialised as tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
}

impl Dataset {
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Integrity(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Integrity(format!("label {bad} outside 0..{CLASSES}")));
        }
        Ok(Dataset {
            pixels,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// The first `k` examples (all of them if `k` is zero or too large).
    pub fn subset(&self, k: usize) -> Dataset {
        let k = if k == 0 { self.len() } else { k.min(self.len()) };
        Dataset {
            pixels: self.pixels[..k * PIXELS].to_vec(),
            labels: self.labels[..k].to_vec(),
            split: self.split,
        }
    }

    /// All images as an `[N, 1, 28, 28]` tensor in `[0, 1]`.
    pub fn images<S: Real>(&self) -> Tensor<S> {
        let scale = 1.0 / 255.0;
        Tensor::new(
            [self.len(), 1, IMAGE_SIDE, IMAGE_SIDE],
            self.pixels.iter().map(|&p| S::from_f64(p as f64 * scale)).collect(),
        )
        .expect("pixel count checked at construction")
    }

    /// Selected examples as an `[B, 1, 28, 28]` tensor plus labels.
    pub fn batch<S: Real>(&self, indices: &[usize]) -> Result<Batch<S>> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = 1.0 / 255.0;
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend(
                self.pixels[i * PIXELS..(i + 1) * PIXELS]
                    .iter()
                    .map(|&p| S::from_f64(p as f64 * scale)),
            );
            labels.push(self.labels[i] as usize);
        }
        Ok(Batch {
            images: Tensor::new([indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, "header"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated IDX {what}")),
    )
}

/// Parses an IDX image file body: magic, count, rows, cols, then pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::format(path, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let body = &bytes[16..];
    let need = count * PIXELS;
    if body.len() < need {
        return Err(truncated(path, "image data"));
    }
    if body.len() > need {
        return Err(Error::format(path, format!("{} trailing bytes", body.len() - need)));
    }
    Ok((count, body.to_vec()))
}

/// Parses an IDX label file body: magic, count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(truncated(path, "label data"));
    }
    if body.len() > count {
        return Err(Error::format(path, format!("{} trailing bytes", body.len() - count)));
    }
    Ok(body.to_vec())
}

/// Loads a paired image/label IDX file set (raw or gzipped).
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (count, pixels) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let labels_v = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if labels_v.len() != count {
        return Err(Error::Integrity(format!(
            "{} holds {count} images but {} holds {} labels",
            images.display(),
            labels.display(),
            labels_v.len()
        )));
    }
    Dataset::from_raw(pixels, labels_v, split)
}

fn locate(dir: &Path, stem: &str) -> PathBuf {
    let raw = dir.join(stem);
    if raw.exists() {
        return raw;
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        raw
    }
}

/// Loads one split using the standard MNIST file names
/// (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ... with optional `.gz`).
pub fn load_split(data_root: &Path, id: DatasetId, split: Split) -> Result<Dataset> {
    let dir = id.dir(data_root);
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = locate(&dir, &format!("{prefix}-images-idx3-ubyte"));
    let labels = locate(&dir, &format!("{prefix}-labels-idx1-ubyte"));
    load_idx(&images, &labels, split)
}

/// How one epoch is cut into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Index lists for `epoch`. Shuffled plans draw a fresh permutation per
    /// epoch from an epoch-indexed stream of the seed.
    pub fn epoch_batches(&self, n: usize, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if self.batch_size > n {
            return Err(Error::Contract(format!(
                "batch size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        if let Some(seed) = self.shuffle_seed {
            order.shuffle(&mut rng_for(seed, Stream::Shuffle { epoch }));
        }
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.drop_last && batches.last().is_some_and(|b| b.len() < self.batch_size) {
            batches.pop();
        }
        Ok(batches)
    }
}
