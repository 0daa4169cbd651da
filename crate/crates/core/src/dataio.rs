//! MNIST IDX ingestion, weight-file persistence and dataset subsetting.
//!
//! IDX files are read raw or gzip-compressed (by `.gz` extension). Weight
//! files use the `MAAPWT01` format:
//!
//! ```text
//! b"MAAPWT01"
//! u64 LE  header length in bytes
//! header  UTF-8 text, one line per weighted layer:
//!           conv <kernels> <in_channels> <kernel_h> <kernel_w>
//!           dense <outputs> <inputs>
//! payload f64 LE values; per layer the weights, then the biases
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{LayerWeights, WeightKind, WeightSet};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const WEIGHTS_MAGIC: &[u8; 8] = b"MAAPWT01";

/// Images as one row-major buffer of `count * rows * cols` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl RawImages {
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let word = bytes.get(at..at + 4).ok_or(Error::UnexpectedEof)?;
    Ok(u32::from_be_bytes(word.try_into().unwrap()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::NotIdxImages(magic));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or(Error::UnexpectedEof)?;
    let payload = bytes.get(16..16 + len).ok_or(Error::UnexpectedEof)?;
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::NotIdxLabels(magic));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + count).ok_or(Error::UnexpectedEof)?;
    if let Some(&bad) = payload.iter().find(|&&l| l > 9) {
        return Err(Error::LabelOutOfRange(bad));
    }
    Ok(payload.to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

/// Equal-length images and labels, at least one of each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: RawImages,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(images: RawImages, labels: Vec<u8>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { images, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_idx_images(images)?, load_idx_labels(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.image(i)
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.images.rows, self.images.cols)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u8)> + '_ {
        (0..self.len()).map(|i| (self.image(i), self.label(i)))
    }

    /// The listed samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.images.rows * self.images.cols;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InsufficientData(format!(
                    "index {i} beyond {} samples",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(
            RawImages {
                count: indices.len(),
                rows: self.images.rows,
                cols: self.images.cols,
                pixels,
            },
            labels,
        )
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// `n` distinct indices drawn from `0..len` by a partial Fisher-Yates shuffle.
pub fn subset_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::InsufficientData(format!(
            "cannot draw {n} samples from {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

/// Deterministic sample of `n` items without replacement.
pub fn subset(data: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    data.select(&subset_indices(data.len(), n, seed)?)
}

fn header_text(weights: &WeightSet) -> String {
    let mut text = String::new();
    for layer in &weights.layers {
        match layer.kind {
            WeightKind::Conv {
                kernels,
                in_channels,
                kernel_h,
                kernel_w,
            } => text.push_str(&format!(
                "conv {kernels} {in_channels} {kernel_h} {kernel_w}\n"
            )),
            WeightKind::Dense { outputs, inputs } => {
                text.push_str(&format!("dense {outputs} {inputs}\n"))
            }
        }
    }
    text
}

pub fn encode_weights(weights: &WeightSet) -> Vec<u8> {
    let header = header_text(weights);
    let mut out = Vec::with_capacity(16 + header.len() + 8 * weights.param_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in weights.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_kind(line: &str) -> Result<WeightKind> {
    let bad = || Error::WeightFormat(format!("bad layer line {line:?}"));
    let mut parts = line.split_whitespace();
    let tag = parts.next().ok_or_else(bad)?;
    let dims: Vec<usize> = parts
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if dims.contains(&0) {
        return Err(bad());
    }
    match (tag, dims.as_slice()) {
        ("conv", &[kernels, in_channels, kernel_h, kernel_w]) => Ok(WeightKind::Conv {
            kernels,
            in_channels,
            kernel_h,
            kernel_w,
        }),
        ("dense", &[outputs, inputs]) => Ok(WeightKind::Dense { outputs, inputs }),
        _ => Err(bad()),
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightSet> {
    if bytes.len() < 8 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::WeightFormat("bad magic, expected MAAPWT01".into()));
    }
    let len_bytes = bytes
        .get(8..16)
        .ok_or_else(|| Error::WeightFormat("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| Error::WeightFormat("truncated shape header".into()))?;
    let header = std::str::from_utf8(header)
        .map_err(|_| Error::WeightFormat("shape header is not UTF-8".into()))?;
    let kinds: Vec<WeightKind> = header
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_kind)
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::WeightFormat("shape header lists no layers".into()));
    }

    let payload = &bytes[16 + header_len..];
    let expected: usize = kinds.iter().map(|k| k.weight_len() + k.bias_len()).sum();
    if payload.len() < expected * 8 {
        return Err(Error::WeightFormat(format!(
            "truncated payload: header declares {expected} values, file holds {}",
            payload.len() / 8
        )));
    }
    if payload.len() > expected * 8 {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes after payload",
            payload.len() - expected * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut layers = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let weights: Vec<f64> = values.by_ref().take(kind.weight_len()).collect();
        let bias: Vec<f64> = values.by_ref().take(kind.bias_len()).collect();
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::WeightFormat("non-finite value in payload".into()));
        }
        layers.push(LayerWeights {
            kind,
            weights,
            bias,
        });
    }
    Ok(WeightSet { layers })
}

pub fn save_weights(weights: &WeightSet, path: impl AsRef<Path>) -> Result<()> {
    if weights.values().any(|v| !v.is_finite()) {
        return Err(Error::WeightFormat(
            "refusing to save non-finite values".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_weights(weights))?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    decode_weights(&std::fs::read(path)?)
}
