//! Datasets: MNIST IDX files, static binarization, synthetic bars and
//! stripes, and shuffled minibatches.

use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Environment variable naming the directory that holds the MNIST files.
pub const DATA_DIR_ENV: &str = "QVAE_DATA_DIR";

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Rows of equal-length real vectors, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!("{} values do not form rows of {dim}", values.len())));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx`, concatenated.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }

    /// Rows `range`, as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { dim: self.dim, values: self.values[range.start * self.dim..range.end * self.dim].to_vec() }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx { offset, detail: "file ends inside the header".into() })
}

/// Reads a file, inflating it when it carries the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX image file (magic 2051) into rows of pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx { offset: 0, detail: format!("magic {magic}, expected {IMAGE_MAGIC}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Idx { offset: 8, detail: "zero image dimension".into() });
    }
    let need = 16 + n * dim;
    if bytes.len() != need {
        return Err(Error::Idx {
            offset: bytes.len().min(need),
            detail: format!("expected {need} bytes for {n} images of {rows}x{cols}, found {}", bytes.len()),
        });
    }
    Dataset::new(dim, bytes[16..].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx { offset: 0, detail: format!("magic {magic}, expected {LABEL_MAGIC}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Idx {
            offset: bytes.len().min(8 + n),
            detail: format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image file, gzip-compressed or not.
pub fn load_mnist_idx(path: &Path) -> Result<Dataset> {
    parse_idx_images(&read_maybe_gz(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gz(path)?)
}

/// MNIST with the validation split taken from the end of the training set.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub train_labels: Vec<u8>,
    pub valid_labels: Vec<u8>,
    pub test_labels: Vec<u8>,
}

pub const MNIST_VALIDATION: usize = 10_000;

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{stem} not found in {}", dir.display()))))
}

/// Directory holding the MNIST files: `$QVAE_DATA_DIR` if set, otherwise
/// `default`.
pub fn data_dir(default: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| default.to_path_buf(), PathBuf::from)
}

pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let images = load_mnist_idx(&find(dir, "train-images-idx3-ubyte")?)?;
    let labels = load_idx_labels(&find(dir, "train-labels-idx1-ubyte")?)?;
    let test = load_mnist_idx(&find(dir, "t10k-images-idx3-ubyte")?)?;
    let test_labels = load_idx_labels(&find(dir, "t10k-labels-idx1-ubyte")?)?;
    if labels.len() != images.rows() || test_labels.len() != test.rows() {
        return Err(Error::InvalidArgument("image and label counts differ".into()));
    }
    let n = images.rows();
    let cut = n.saturating_sub(MNIST_VALIDATION);
    Ok(Mnist {
        train: images.slice(0..cut),
        valid: images.slice(cut..n),
        test,
        train_labels: labels[..cut].to_vec(),
        valid_labels: labels[cut..].to_vec(),
        test_labels,
    })
}

/// Thresholds every value: `1` when `> threshold`, else `0`.
pub fn binarize_static(data: &Dataset, threshold: f64) -> Dataset {
    Dataset { dim: data.dim, values: data.values.iter().map(|&v| f64::from(v > threshold)).collect() }
}

/// All distinct `n × n` bar and stripe patterns (`2^{n+1} − 2` of them).
pub fn bars_and_stripes_patterns(n: usize) -> Vec<Vec<f64>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for columns in [false, true] {
        for mask in 0..1usize << n {
            let img: Vec<u8> = (0..n * n)
                .map(|k| {
                    let line = if columns { k % n } else { k / n };
                    ((mask >> line) & 1) as u8
                })
                .collect();
            if seen.insert(img.clone()) {
                out.push(img.into_iter().map(f64::from).collect());
            }
        }
    }
    out
}

/// `count` samples drawn uniformly from the distinct bar and stripe patterns.
pub fn bars_and_stripes(n: usize, count: usize, rng: &mut Rng) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("bars and stripes need side >= 2, got {n}")));
    }
    let patterns = bars_and_stripes_patterns(n);
    let values = (0..count).flat_map(|_| patterns[rng.random_range(0..patterns.len())].clone()).collect();
    Dataset::new(n * n, values)
}

/// Shuffled minibatches covering `0..rows` exactly once.
pub fn batches(rows: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
