//! MNIST IDX ingestion, synthetic outlier streams and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Environment variable overriding the data directory.
pub const DATA_DIR_ENV: &str = "FILTNORM_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar = f64> {
    /// `[N, 1, H, W]`, pixel values in [0, 1].
    pub images: Tensor<S>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(shape, data).expect("gathered batch"), labels)
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, _) = self.gather(&idx);
        Self {
            images,
            labels: self.labels[..n].to_vec(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl IdxReader<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| self.err(offset, "truncated header"))
    }

    /// Checks the magic and returns the dimension sizes and payload offset.
    fn header(&self, magic: u32, rank: usize) -> Result<(Vec<usize>, usize)> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(self.err(
                0,
                format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
            ));
        }
        let dims = (0..rank)
            .map(|i| self.u32_at(4 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = 4 + 4 * rank;
        let want: usize = dims.iter().product();
        if self.bytes.len() < offset + want {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated payload: {} of {want} bytes present",
                    self.bytes.len().saturating_sub(offset)
                ),
            ));
        }
        Ok((dims, offset))
    }
}

/// Loads an IDX image file and its label file.
pub fn load_mnist_idx<S: Scalar>(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset<S>> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    parse_mnist_idx(images_path, &image_bytes, labels_path, &label_bytes, split)
}

pub fn parse_mnist_idx<S: Scalar>(
    images_path: &Path,
    image_bytes: &[u8],
    labels_path: &Path,
    label_bytes: &[u8],
    split: Split,
) -> Result<Dataset<S>> {
    let images = IdxReader {
        path: images_path,
        bytes: image_bytes,
    };
    let (dims, img_off) = images.header(IDX_IMAGES_MAGIC, 3)?;
    let labels = IdxReader {
        path: labels_path,
        bytes: label_bytes,
    };
    let (ldims, lab_off) = labels.header(IDX_LABELS_MAGIC, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(labels.err(4, format!("{} labels for {n} images", ldims[0])));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(images.err(4, "empty image set"));
    }
    let label_vec = label_bytes[lab_off..lab_off + n].to_vec();
    if let Some(pos) = label_vec.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(labels.err(lab_off + pos, format!("label {} out of range", label_vec[pos])));
    }
    let scale: S = cast(1.0 / 255.0);
    let pixels = image_bytes[img_off..img_off + n * h * w]
        .iter()
        .map(|&b| cast::<S>(b as f64) * scale)
        .collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], pixels)?,
        labels: label_vec,
        split,
        num_classes: MNIST_CLASSES,
    })
}

/// Serializes a dataset back into IDX image and label byte streams.
pub fn to_idx_bytes<S: Scalar>(ds: &Dataset<S>) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::invalid(format!("IDX images need [N,1,H,W], got {shape:?}")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [shape[0], shape[2], shape[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in ds.images.data() {
        img.push((v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    Ok((img, lab))
}

/// Resolves the MNIST directory: the explicit path, else `$FILTNORM_DATA_DIR`,
/// else `data/mnist` under the current directory.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(p);
    }
    PathBuf::from("data/mnist")
}

/// Loads the standard train and test files from `dir`.
pub fn load_mnist_dir<S: Scalar>(dir: &Path) -> Result<(Dataset<S>, Dataset<S>)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Gaussian stream with a planted fraction of far outliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub mean: f64,
    pub std: f64,
    /// Fraction of elements replaced by outliers, in [0, 1).
    pub outlier_rate: f64,
    /// Outlier distance from `mean`, in units of `std`, drawn uniformly.
    pub outlier_low: f64,
    pub outlier_high: f64,
    pub len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            outlier_rate: 0.0,
            outlier_low: 14.0,
            outlier_high: 20.0,
            len: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::config(format!(
                "outlier rate must lie in [0, 1), got {}",
                self.outlier_rate
            )));
        }
        if self.outlier_low > self.outlier_high {
            return Err(Error::config("outlier band is inverted"));
        }
        if self.std.is_nan() || self.std <= 0.0 || self.len == 0 {
            return Err(Error::config("std and len must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub values: Tensor<f64>,
    /// Sample mean of the inliers.
    pub inlier_mean: f64,
    /// Biased sample variance of the inliers.
    pub inlier_var: f64,
    /// Sorted positions of planted outliers.
    pub outliers: Vec<usize>,
}

pub fn synth_gaussian_with_outliers(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values: Vec<f64> = (0..spec.len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.mean + spec.std * z
        })
        .collect();
    let count = (spec.outlier_rate * spec.len as f64).round() as usize;
    let mut outliers = index::sample(&mut rng, spec.len, count).into_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        let mag = rng.random_range(spec.outlier_low..=spec.outlier_high);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        values[i] = spec.mean + sign * mag * spec.std;
    }
    let mut is_out = vec![false; spec.len];
    outliers.iter().for_each(|&i| is_out[i] = true);
    let inliers: Vec<f64> = values
        .iter()
        .zip(&is_out)
        .filter(|(_, &o)| !o)
        .map(|(&v, _)| v)
        .collect();
    let n = inliers.len().max(1) as f64;
    let inlier_mean = inliers.iter().sum::<f64>() / n;
    let inlier_var = inliers.iter().map(|v| (v - inlier_mean).powi(2)).sum::<f64>() / n;
    Ok(SyntheticSample {
        values: Tensor::new(vec![spec.len], values)?,
        inlier_mean,
        inlier_var,
        outliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled; the final partial batch is dropped.
    Train,
    /// Sequential; the final partial batch is kept.
    Eval,
}

/// Stream seed for `(seed, epoch)`.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Index lists of the batches of one epoch.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64, mode: BatchMode) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if mode == BatchMode::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Endless training-batch stream across epochs.
#[derive(Debug, Clone)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::invalid(format!(
                "batch size {batch_size} does not fit a dataset of {len}"
            )));
        }
        let pending = batches(len, batch_size, seed, 0, BatchMode::Train)?.into_iter();
        Ok(Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            pending,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        loop {
            if let Some(b) = self.pending.next() {
                return Some(b);
            }
            self.epoch += 1;
            self.pending = batches(self.len, self.batch_size, self.seed, self.epoch, BatchMode::Train)
                .expect("validated batch size")
                .into_iter();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx(n: u32, magic_images: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = magic_images.to_be_bytes().to_vec();
        for d in [n, 2, 3] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n * 6).map(|v| (v * 17 % 256) as u8));
        let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend((0..n).map(|v| (v % 10) as u8));
        (img, lab)
    }

    fn parse(img: &[u8], lab: &[u8]) -> Result<Dataset<f64>> {
        parse_mnist_idx(Path::new("img"), img, Path::new("lab"), lab, Split::Train)
    }

    #[test]
    fn parses_and_round_trips() {
        let (img, lab) = tiny_idx(4, IDX_IMAGES_MAGIC);
        let ds = parse(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[4, 1, 2, 3]);
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
        assert_eq!(ds.images.data()[1], 17.0 / 255.0);
        let (img2, lab2) = to_idx_bytes(&ds).unwrap();
        assert_eq!((img2.as_slice(), lab2.as_slice()), (img.as_slice(), lab.as_slice()));
        let again = parse(&img2, &lab2).unwrap();
        assert_eq!(again.images, ds.images);
    }

    #[test]
    fn format_errors() {
        let (img, lab) = tiny_idx(4, IDX_IMAGES_MAGIC);
        // Labels passed where images belong.
        let err = parse(&lab, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        // Image magic in the label slot.
        let err = parse(&img, &img).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = parse(&[], &lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = parse(&img[..img.len() - 1], &lab).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let (_, lab3) = tiny_idx(3, IDX_IMAGES_MAGIC);
        assert!(parse(&img, &lab3).is_err());
    }

    #[test]
    fn batching_rules() {
        let b = batches(100, 16, 7, 0, BatchMode::Train).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|x| x.len() == 16));
        assert_eq!(b, batches(100, 16, 7, 0, BatchMode::Train).unwrap());
        assert_ne!(b, batches(100, 16, 7, 1, BatchMode::Train).unwrap());
        let e = batches(100, 16, 7, 0, BatchMode::Eval).unwrap();
        assert_eq!(e.len(), 7);
        assert_eq!(e[6].len(), 4);
        let all = batches(10, 10, 1, 0, BatchMode::Train).unwrap();
        assert_eq!(all.len(), 1);
        let mut sorted = all[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(batches(10, 0, 1, 0, BatchMode::Train).is_err());
    }

    #[test]
    fn stream_crosses_epochs() {
        let s = BatchStream::new(10, 4, 3).unwrap();
        let got: Vec<_> = s.take(5).collect();
        assert_eq!(got.len(), 5);
        assert!(BatchStream::new(3, 4, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            outlier_rate: 0.01,
            len: 5000,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let a = synth_gaussian_with_outliers(&spec).unwrap();
        let b = synth_gaussian_with_outliers(&spec).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.outliers.len(), 50);
        for &i in &a.outliers {
            let z = (a.values.data()[i] - a.inlier_mean) / a.inlier_var.sqrt();
            assert!(z.abs() > 13.0);
        }
        let clean = synth_gaussian_with_outliers(&SyntheticSpec { len: 10_000, ..spec }.with_rate(0.0)).unwrap();
        assert!(clean.outliers.is_empty());
        assert!(clean.inlier_mean.abs() < 4.0 / 100.0);
    }

    #[test]
    fn synthetic_spec_validation() {
        assert!(SyntheticSpec::default().with_rate(1.0).validate().is_err());
        let inverted = SyntheticSpec {
            outlier_low: 5.0,
            outlier_high: 4.0,
            ..SyntheticSpec::default()
        };
        assert!(inverted.validate().is_err());
    }

    impl SyntheticSpec {
        fn with_rate(mut self, r: f64) -> Self {
            self.outlier_rate = r;
            self
        }
    }
}
