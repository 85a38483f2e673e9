//! Datasets: MNIST in IDX format and small synthetic generators.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::LabeledBatch;
use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "DALE_MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
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

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `idx` as a batch whose ids are the dataset row numbers.
    pub fn batch(&self, idx: &[usize]) -> Result<LabeledBatch> {
        let inputs = self.inputs.select(Axis(0), idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::with_ids(inputs, labels, idx.iter().map(|&i| i as u64).collect())
    }

    pub fn full_batch(&self) -> Result<LabeledBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Fraction of examples per class.
    pub fn label_marginal(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1.0;
        }
        counts.iter().map(|c| c / self.len() as f64).collect()
    }

    fn take(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Splits off the last `n_val` rows (after a seeded shuffle) as a
    /// validation set.
    pub fn split_val(&self, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_val == 0 || n_val >= self.len() {
            return Err(Error::Parameter(format!(
                "validation size must be in 1..{}, got {n_val}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = self.len() - n_val;
        Ok((self.take(&idx[..cut], self.split), self.take(&idx[cut..], Split::Val)))
    }
}

/// `n` rows drawn uniformly without replacement.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > dataset.len() {
        return Err(Error::Parameter(format!(
            "subset size {n} not in 1..={}",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(dataset.take(&idx, dataset.split))
}

fn read_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset: bytes.len(),
            needed: offset + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: 4,
            available: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn body(bytes: &[u8], start: usize, len: usize) -> std::result::Result<&[u8], IdxError> {
    bytes.get(start..start + len).ok_or(IdxError::Truncated {
        offset: bytes.len(),
        needed: start + len,
        available: bytes.len(),
    })
}

/// Parses an IDX image file into `(count, rows * cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let pixels = body(bytes, 16, n * d)?;
    Ok((n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(body(bytes, 8, n)?.to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let idx_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Idx { path, source }
    };
    let image_bytes = std::fs::read(images_path)?;
    let (n, d, pixels) = parse_idx_images(&image_bytes).map_err(idx_err(images_path))?;
    let label_bytes = std::fs::read(labels_path)?;
    let labels = parse_idx_labels(&label_bytes).map_err(idx_err(labels_path))?;
    if labels.len() != n {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            source: IdxError::CountMismatch {
                images: n,
                labels: labels.len(),
            },
        });
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(10);
    let inputs = Array2::from_shape_vec((n, d), pixels).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(
        inputs,
        labels.into_iter().map(usize::from).collect(),
        num_classes,
        Split::Train,
    )
}

/// MNIST directory: `$DALE_MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Val => return Err(Error::Config("MNIST has no val files; use split_val".into())),
    };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = split;
    Ok(ds)
}

/// Gaussian blobs: row `i` belongs to class `i mod K` and sits at its
/// center plus `spread` times a standard normal draw.
pub fn make_blobs(n: usize, centers: &[Vec<f64>], spread: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Parameter("need at least 2 points".into()));
    }
    if centers.len() < 2 {
        return Err(Error::Parameter("need at least 2 centers".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::Shape("centers must share a positive dimension".into()));
    }
    if !(spread >= 0.0) {
        return Err(Error::Parameter(format!("spread must be nonnegative, got {spread}")));
    }
    let k = centers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs[[i, j]] = centers[c][j] + spread * z;
        }
        labels.push(c);
    }
    Dataset::new(inputs, labels, k, Split::Train)
}

/// Two interleaving half circles with Gaussian noise.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Parameter("need at least 2 points".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Parameter(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let mut inputs = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y, label) = if i % 2 == 0 {
            let t = std::f64::consts::PI * (i / 2) as f64 / (n_outer.max(2) - 1) as f64;
            (t.cos(), t.sin(), 0)
        } else {
            let t = std::f64::consts::PI * (i / 2) as f64 / (n_inner.max(2) - 1) as f64;
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        inputs[[i, 0]] = x + noise * zx;
        inputs[[i, 1]] = y + noise * zy;
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, Split::Train)
}
