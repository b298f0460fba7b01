//! MNIST loading (IDX format), one-hot labels, shuffled mini-batches,
//! stimulus subsampling, and a small synthetic dataset for fast tests.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::{Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const INPUT_WIDTH: usize = MNIST_SIDE * MNIST_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const DATA_DIR_ENV: &str = "LOCERR_MNIST_DIR";
/// Fallback dataset directory, relative to the working directory.
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
/// Script that downloads the dataset into [`DEFAULT_DATA_DIR`].
pub const FETCH_SCRIPT: &str = "scripts/fetch_mnist.sh";

const CACHE_MAGIC: &[u8; 4] = b"LECD";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(
        "MNIST files not found in {dir} (set {DATA_DIR_ENV} or run {FETCH_SCRIPT})"
    )]
    Missing { dir: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images (one row per sample, pixels in `[0, 1]`) with digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Matrix,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(images: Matrix, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.rows() != labels.len() {
            return Err(DataError::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&q) = labels.iter().find(|&&q| q as usize >= NUM_CLASSES) {
            return Err(DataError::Domain(format!("label {q} outside 0..=9")));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Domain("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Rows and labels at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &q in &self.labels {
            h[q as usize] += 1;
        }
        h
    }

    /// Writes the binary cache format: `LECD`, version u32, rows u64, cols u64
    /// (all little-endian), row-major f64 pixels, then one byte per label.
    pub fn save_cache(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::with_capacity(24 + self.images.data().len() * 8 + self.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.images.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.images.cols() as u64).to_le_bytes());
        for p in self.images.data() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf.extend_from_slice(&self.labels);
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io_err(path))
    }

    pub fn load_cache(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() < 24 || &bytes[..4] != CACHE_MAGIC {
            return Err(DataError::Format("not a dataset cache file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(DataError::Format(format!("cache version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let n_pix = rows * cols;
        if bytes.len() != 24 + n_pix * 8 + rows {
            return Err(DataError::Format("cache file truncated".into()));
        }
        let pixels = bytes[24..24 + n_pix * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let images = Matrix::from_vec(rows, cols, pixels)
            .map_err(|e| DataError::Format(e.to_string()))?;
        Self::new(images, bytes[24 + n_pix * 8..].to_vec())
    }
}

/// Label as a ten-component indicator vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneHot([f64; NUM_CLASSES]);

impl OneHot {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn class(&self) -> usize {
        self.0.iter().position(|&x| x == 1.0).unwrap_or(0)
    }
}

pub fn one_hot(q: usize) -> Result<OneHot, DataError> {
    if q >= NUM_CLASSES {
        return Err(DataError::Domain(format!("digit {q} outside 0..=9")));
    }
    let mut h = [0.0; NUM_CLASSES];
    h[q] = 1.0;
    Ok(OneHot(h))
}

/// One-hot rows for a batch of labels.
pub fn one_hot_matrix(labels: &[u8]) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), NUM_CLASSES);
    for (r, &q) in labels.iter().enumerate() {
        m.set(r, q as usize, 1.0);
    }
    m
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Format("header truncated".into()))
}

/// Parses an IDX3 image file; pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Format(format!(
            "image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * width {
        return Err(DataError::Format(format!(
            "image file truncated: {} of {} pixel bytes",
            body.len(),
            count * width
        )));
    }
    let data = body[..count * width]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Matrix::from_vec(count, width, data).map_err(|e| DataError::Format(e.to_string()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Format(format!(
            "label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Format(format!(
            "label file truncated: {} of {count} labels",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

/// Loads an image/label IDX pair and cross-checks their counts.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(DataError::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            images.rows(),
            labels_path.display(),
            labels.len()
        )));
    }
    LabeledDataset::new(images, labels)
}

/// Writes a dataset as an IDX pair with square images, rounding pixels to
/// bytes. Widths that are not perfect squares are written as 1×width images.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let width = ds.width();
    let side = (width as f64).sqrt().round() as usize;
    let (r, c) = if side * side == width { (side, side) } else { (1, width) };
    let mut img = Vec::with_capacity(16 + ds.images().data().len());
    for v in [IMAGE_MAGIC, ds.len() as u32, r as u32, c as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images().data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(ds.labels());
    fs::write(images_path, img).map_err(io_err(images_path))?;
    fs::write(labels_path, lab).map_err(io_err(labels_path))
}

/// Location of the four standard MNIST files.
#[derive(Clone, Debug)]
pub struct MnistDir(pub PathBuf);

impl MnistDir {
    /// `explicit`, else `$LOCERR_MNIST_DIR`, else `data/mnist`.
    pub fn resolve(explicit: Option<&Path>) -> Self {
        let dir = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        Self(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn exists(&self) -> bool {
        [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ]
        .iter()
        .all(|f| self.file(f).is_file())
    }

    pub fn train(&self) -> Result<LabeledDataset, DataError> {
        self.load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    }

    pub fn test(&self) -> Result<LabeledDataset, DataError> {
        self.load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    }

    fn load(&self, images: &str, labels: &str) -> Result<LabeledDataset, DataError> {
        if !self.exists() {
            return Err(DataError::Missing { dir: self.0.clone() });
        }
        load_idx(&self.file(images), &self.file(labels))
    }
}

/// Index batches for one epoch: a fresh Fisher–Yates shuffle of `0..count`
/// cut into consecutive `batch_size` slices; the last one may be short.
pub fn minibatch_indices(count: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Domain("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn minibatches(ds: &LabeledDataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size > ds.len() {
        return Err(DataError::Domain(format!(
            "batch size {batch_size} exceeds {} samples",
            ds.len()
        )));
    }
    minibatch_indices(ds.len(), batch_size, rng)
}

/// `k` distinct row indices drawn uniformly (partial Fisher–Yates).
pub fn subsample_indices(count: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>, DataError> {
    if k > count {
        return Err(DataError::Domain(format!(
            "cannot draw {k} samples from {count}"
        )));
    }
    let mut pool: Vec<usize> = (0..count).collect();
    for i in 0..k {
        let j = i + rng.below(count - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

pub fn subsample(ds: &LabeledDataset, k: usize, rng: &mut Rng) -> Result<LabeledDataset, DataError> {
    let idx = subsample_indices(ds.len(), k, rng)?;
    Ok(ds.select(&idx))
}

/// Two Gaussian blobs in pixel space, clipped to `[0, 1]`, labelled 0 and 1.
#[derive(Clone, Debug)]
pub struct SyntheticBlobs {
    pub count: usize,
    pub width: usize,
    /// Per-pixel noise standard deviation around each class template.
    pub noise: f64,
}

impl Default for SyntheticBlobs {
    fn default() -> Self {
        Self {
            count: 400,
            width: INPUT_WIDTH,
            noise: 0.25,
        }
    }
}

impl SyntheticBlobs {
    pub fn generate(&self, rng: &mut Rng) -> LabeledDataset {
        let templates = self.templates(rng);
        self.sample(&templates, self.count, rng)
    }

    /// Train and test sets drawn around the same two templates.
    pub fn generate_split(&self, test_count: usize, rng: &mut Rng) -> (LabeledDataset, LabeledDataset) {
        let templates = self.templates(rng);
        let train = self.sample(&templates, self.count, rng);
        (train, self.sample(&templates, test_count, rng))
    }

    fn templates(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..2)
            .map(|_| (0..self.width).map(|_| 0.2 + 0.6 * rng.uniform()).collect())
            .collect()
    }

    fn sample(&self, templates: &[Vec<f64>], count: usize, rng: &mut Rng) -> LabeledDataset {
        let mut images = Matrix::zeros(count, self.width);
        let mut labels = Vec::with_capacity(count);
        for r in 0..count {
            let q = r % 2;
            for (x, t) in images.row_mut(r).iter_mut().zip(&templates[q]) {
                *x = (t + self.noise * rng.normal()).clamp(0.0, 1.0);
            }
            labels.push(q as u8);
        }
        LabeledDataset { images, labels }
    }
}
