//! Datasets: seeded Gaussian-mixture blobs, IDX image files, batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Distance of blob centers from the origin unless configured otherwise.
pub const DEFAULT_BLOB_RADIUS: f64 = 3.0;

const SPLIT_STREAM: u64 = 0x5EED_0001;
const BATCH_STREAM: u64 = 0x5EED_1000;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, need {needed} bytes but file has {actual}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },
    #[error("{path}: {extra} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScaling {
    None,
    Standardize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `features x samples`.
    pub x: Matrix,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub feature_scaling: FeatureScaling,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if y.len() != x.cols() {
            return Err(Error::shape("dataset", x.shape(), (y.len(), 1)));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::usage(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self {
            x,
            y,
            n_classes,
            feature_scaling: FeatureScaling::None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            feature_scaling: self.feature_scaling,
        }
    }

    /// Seeded split into `(train, val)`; `val` gets `round(len * val_fraction)` samples.
    /// Both parts keep the original sample order.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "val fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let n = self.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(Error::config(format!(
                "cannot split {n} samples with fraction {val_fraction}"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::stream(seed, SPLIT_STREAM).shuffle(&mut perm);
        let mut val = perm[..n_val].to_vec();
        let mut train = perm[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    pub fn max_norm(&self) -> f64 {
        self.x.column_norms().into_iter().fold(0.0, f64::max)
    }

    /// Writes `label,f0,f1,...` rows under a schema comment line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "# biasgeom dataset v1")?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.features()).map(|f| format!("f{f}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.y[k].to_string()];
            row.extend(self.x.column(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-feature affine standardization fitted on one split and applied to others.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len() as f64;
        let (mean, std) = (0..ds.features())
            .map(|i| {
                let row = ds.x.row(i);
                let mean = row.iter().fold(0.0, |a, &v| a + v) / n;
                let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                let std = var.sqrt();
                (mean, if std > 1e-12 { std } else { 1.0 })
            })
            .unzip();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let x = Matrix::from_fn(ds.x.rows(), ds.x.cols(), |i, k| {
            (ds.x.get(i, k) - self.mean[i]) / self.std[i]
        });
        Dataset {
            x,
            y: ds.y.clone(),
            n_classes: ds.n_classes,
            feature_scaling: FeatureScaling::Standardize,
        }
    }
}

/// Gaussian-mixture classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobsSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub radius: f64,
    /// Mixture components per class; sample `i` of a class belongs to component `i % clusters`.
    pub clusters_per_class: usize,
    /// When set, samples are mapped into this many features through a seeded
    /// matrix with orthonormal columns (drawn after the samples), so the data
    /// keeps its `dim`-dimensional geometry inside a larger input space.
    pub embed_dim: Option<usize>,
    pub seed: u64,
}

impl BlobsSpec {
    pub fn new(n_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Self {
        Self {
            n_classes,
            dim,
            per_class,
            spread,
            radius: DEFAULT_BLOB_RADIUS,
            clusters_per_class: 1,
            embed_dim: None,
            seed,
        }
    }

    /// Centers are drawn first (class-major, then component), each a normalized
    /// `dim`-dimensional standard normal scaled by `radius`. Samples follow,
    /// class-major: `center + spread * N(0, I)`.
    pub fn generate(&self) -> Result<Dataset> {
        if self.n_classes == 0
            || self.dim == 0
            || self.per_class == 0
            || self.clusters_per_class == 0
        {
            return Err(Error::config("blob counts must be positive"));
        }
        if self.spread.is_nan() || self.spread < 0.0 || self.radius.is_nan() || self.radius < 0.0 {
            return Err(Error::config("blob spread and radius must be non-negative"));
        }
        let mut rng = Rng::new(self.seed);
        let centers: Vec<Vec<Vec<f64>>> = (0..self.n_classes)
            .map(|_| {
                (0..self.clusters_per_class)
                    .map(|_| {
                        random_direction(self.dim, &mut rng)
                            .into_iter()
                            .map(|v| v * self.radius)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let n = self.n_classes * self.per_class;
        let mut data = vec![0.0; self.dim * n];
        let mut y = Vec::with_capacity(n);
        for (c, class_centers) in centers.iter().enumerate() {
            for i in 0..self.per_class {
                let k = y.len();
                let center = &class_centers[i % self.clusters_per_class];
                for (f, &cv) in center.iter().enumerate() {
                    data[f * n + k] = cv + self.spread * rng.normal();
                }
                y.push(c);
            }
        }
        let x = Matrix::new(self.dim, n, data)?;
        let x = match self.embed_dim {
            Some(ambient) if ambient < self.dim => {
                return Err(Error::config(format!(
                    "embedding dimension {ambient} is smaller than blob dimension {}",
                    self.dim
                )))
            }
            Some(ambient) => orthonormal_columns(ambient, self.dim, &mut rng).matmul(&x)?,
            None => x,
        };
        Dataset::new(x, y, self.n_classes)
    }
}

/// `rows x cols` matrix (rows >= cols) with orthonormal columns: modified
/// Gram-Schmidt on standard-normal columns, drawn row-major.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let g = Matrix::from_fn(rows, cols, |_, _| rng.normal());
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = g.column(j);
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|a| a / norm).collect());
    }
    Matrix::from_fn(rows, cols, |i, j| basis[j][i])
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn make_blobs(
    n_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobsSpec::new(n_classes, dim, per_class, spread, seed).generate()
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_len(path: &Path, bytes: &[u8], needed: usize) -> Result<(), IdxError> {
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    check_len(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_exact(path: &Path, bytes: &[u8], needed: usize) -> Result<(), IdxError> {
    check_len(path, bytes, needed)?;
    if bytes.len() > needed {
        return Err(IdxError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - needed,
        });
    }
    Ok(())
}

/// Loads an IDX image file (`u8` pixels scaled to `[0, 1]`, one flattened image
/// per column) and its IDX label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let images = read_file(images_path)?;
    check_magic(images_path, &images, IDX_IMAGES_MAGIC)?;
    check_len(images_path, &images, 16)?;
    let count = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let features = rows * cols;
    check_exact(images_path, &images, 16 + count * features)?;

    let labels = read_file(labels_path)?;
    check_magic(labels_path, &labels, IDX_LABELS_MAGIC)?;
    check_len(labels_path, &labels, 8)?;
    let label_count = be_u32(&labels, 4) as usize;
    check_exact(labels_path, &labels, 8 + label_count)?;
    if label_count != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if count == 0 || features == 0 {
        return Err(IdxError::Truncated {
            path: images_path.to_path_buf(),
            needed: 17,
            actual: images.len(),
        });
    }

    let pixels = &images[16..];
    let mut data = vec![0.0; features * count];
    for k in 0..count {
        for f in 0..features {
            data[f * count + k] = pixels[k * features + f] as f64 / 255.0;
        }
    }
    let y: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let n_classes = y.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        x: Matrix::new(features, count, data).expect("sizes checked"),
        y,
        n_classes,
        feature_scaling: FeatureScaling::None,
    })
}

/// Writes `ds` as IDX files with images of `rows x cols` pixels.
/// Feature values must lie in `[0, 1]`; they are stored as `round(255 v)`.
pub fn write_idx(
    ds: &Dataset,
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != ds.features() {
        return Err(Error::usage(format!(
            "image shape {rows}x{cols} does not match {} features",
            ds.features()
        )));
    }
    if ds.x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::usage("IDX pixel values must lie in [0, 1]"));
    }
    if ds.y.iter().any(|&l| l > 255) {
        return Err(Error::usage("IDX labels must fit in a byte"));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for k in 0..n {
        for f in 0..ds.features() {
            img.push((ds.x.get(f, k) * 255.0).round() as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.y.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches over a permutation derived from `(seed, epoch)`.
///
/// A final batch with fewer than 2 samples (and fewer than `batch_size`) is
/// dropped, since batch normalization needs two samples.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    Rng::stream(seed, BATCH_STREAM.wrapping_add(epoch)).shuffle(&mut perm);
    perm.chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2.min(batch_size))
        .map(|chunk| Batch {
            x: ds.x.select_columns(chunk),
            labels: chunk.iter().map(|&i| ds.y[i]).collect(),
            indices: chunk.to_vec(),
        })
        .collect()
}
