//! Datasets: CIFAR-10 binary files, synthetic blob images, normalization,
//! augmentation and batching.
//!
//! Images are kept as bytes in (N, C, H, W) order and converted to normalized `f64`
//! batches on demand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Published CIFAR-10 channel statistics on the [0, 1] scale.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing data file {0}")]
    Missing(PathBuf),
    #[error("{file}: length {got} bytes, expected {expected} (whole records of {record} bytes)")]
    BadLength { file: PathBuf, got: usize, expected: usize, record: usize },
    #[error("{file}: record {record} has label {label}, outside [0, {classes})")]
    BadLabel { file: PathBuf, record: usize, label: u8, classes: usize },
    #[error("io error on {file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// (N, C, H, W) bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// (C, H, W)
    pub shape: [usize; 3],
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, shape: [usize; 3], classes: usize, split: Split) -> Result<Self> {
        let per: usize = shape.iter().product();
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if per == 0 || images.len() != labels.len() * per {
            return Err(DataError::Invalid(format!(
                "{} image bytes for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(DataError::Invalid(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { images, labels, shape, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.shape, self.classes, split)
    }

    /// First `len - n_val` records for training, the last `n_val` for validation.
    pub fn split_last(&self, n_val: usize) -> Result<(Self, Self)> {
        if n_val == 0 || n_val >= self.len() {
            return Err(DataError::Invalid(format!("cannot hold out {n_val} of {} records", self.len())));
        }
        let cut = self.len() - n_val;
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Val)?))
    }

    /// The first `n` records.
    pub fn take(&self, n: usize, split: Split) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, split)
    }
}

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { file: file.to_path_buf(), source }
}

/// Reads one CIFAR-10 binary file: records of one label byte and 3072 pixel bytes.
pub fn read_cifar_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if !path.exists() {
        return Err(DataError::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadLength {
            file: path.to_path_buf(),
            got: bytes.len(),
            expected: bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD,
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (record, r) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if r[0] >= 10 {
            return Err(DataError::BadLabel { file: path.to_path_buf(), record, label: r[0], classes: 10 });
        }
        labels.push(r[0]);
        images.extend_from_slice(&r[1..]);
    }
    Ok((images, labels))
}

pub fn write_cifar_file(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.shape != [3, CIFAR_SIDE, CIFAR_SIDE] || ds.classes > 10 {
        return Err(DataError::Invalid(format!(
            "shape {:?} / {} classes cannot be written as CIFAR-10",
            ds.shape, ds.classes
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Loads the five training files and the test file from `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let (i, l) = read_cifar_file(&dir.join(f))?;
        images.extend(i);
        labels.extend(l);
    }
    let shape = [3, CIFAR_SIDE, CIFAR_SIDE];
    let train = Dataset::new(images, labels, shape, 10, Split::Train)?;
    let (i, l) = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((train, Dataset::new(i, l, shape, 10, Split::Test)?))
}

/// Writes `train` across the five training files (as evenly as possible) and `test`
/// as the test file, in the layout [`load_cifar10_binary`] reads.
pub fn export_cifar10_binary(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = train.len();
    for (k, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let idx: Vec<usize> = (k * n / 5..(k + 1) * n / 5).collect();
        if idx.is_empty() {
            return Err(DataError::Invalid(format!("{n} training records cannot fill five files")));
        }
        write_cifar_file(&dir.join(f), &train.subset(&idx, Split::Train)?)?;
    }
    write_cifar_file(&dir.join(CIFAR_TEST_FILE), test)
}

/// Class-conditional images: each class owns a prototype built from three Gaussian
/// blobs with class-specific positions, widths and colours. Samples are the
/// prototype shifted by up to `jitter` pixels plus pixel noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n: usize,
    pub side: usize,
    /// Standard deviation of per-pixel Gaussian noise on the [0, 1] scale.
    pub noise: f64,
    /// Maximum translation in pixels along each axis.
    pub jitter: usize,
    pub seed: u64,
}

pub const DEFAULT_NOISE: f64 = 0.2;
pub const DEFAULT_JITTER: usize = 2;

impl SyntheticSpec {
    pub fn new(classes: usize, n: usize, side: usize, seed: u64) -> Self {
        Self { classes, n, side, noise: DEFAULT_NOISE, jitter: DEFAULT_JITTER, seed }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<Blob>> {
    let mut rng = substream(spec.seed, "synthetic-prototypes", 0);
    let s = spec.side as f64;
    (0..spec.classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    cy: rng.gen_range(0.2..0.8) * s,
                    cx: rng.gen_range(0.2..0.8) * s,
                    sigma: rng.gen_range(0.08..0.2) * s,
                    color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                })
                .collect()
        })
        .collect()
}

fn render(blobs: &[Blob], side: usize, dy: f64, dx: f64, out: &mut [f64]) {
    let plane = side * side;
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0; 3];
            for b in blobs {
                let d2 = (y as f64 - b.cy - dy).powi(2) + (x as f64 - b.cx - dx).powi(2);
                let a = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                for c in 0..3 {
                    acc[c] += a * b.color[c];
                }
            }
            for c in 0..3 {
                out[c * plane + y * side + x] = 0.5 + 0.35 * acc[c];
            }
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic blob dataset with balanced labels (`i mod classes`).
pub fn synthetic_dataset_with(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > 256 || spec.n == 0 || spec.side == 0 {
        return Err(DataError::Invalid(format!("synthetic spec {spec:?}")));
    }
    let protos = prototypes(spec);
    let split_index = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = substream(spec.seed, "synthetic-samples", split_index);
    let per = 3 * spec.side * spec.side;
    let mut images = Vec::with_capacity(spec.n * per);
    let mut labels = Vec::with_capacity(spec.n);
    let mut buf = vec![0.0; per];
    let j = spec.jitter as i64;
    for i in 0..spec.n {
        let class = i % spec.classes;
        let dy = rng.gen_range(-j..=j) as f64;
        let dx = rng.gen_range(-j..=j) as f64;
        render(&protos[class], spec.side, dy, dx, &mut buf);
        for v in &buf {
            let z: f64 = StandardNormal.sample(&mut rng);
            images.push(quantize(v + spec.noise * z));
        }
        labels.push(class as u8);
    }
    Dataset::new(images, labels, [3, spec.side, spec.side], spec.classes, split)
}

/// Blob dataset with the default noise and jitter.
pub fn synthetic_dataset(classes: usize, n: usize, side: usize, seed: u64) -> Result<Dataset> {
    synthetic_dataset_with(&SyntheticSpec::new(classes, n, side, seed), Split::Train)
}

/// Per-channel affine normalization applied to pixels scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self { mean: CIFAR_MEAN.to_vec(), std: CIFAR_STD.to_vec() }
    }

    /// Population statistics of `ds`.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let [c, h, w] = ds.shape;
        let plane = h * w;
        let count = (ds.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..ds.len() {
            let img = ds.image(i);
            for ci in 0..c {
                for &p in &img[ci * plane..(ci + 1) * plane] {
                    mean[ci] += p as f64 / 255.0;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..ds.len() {
            let img = ds.image(i);
            for ci in 0..c {
                for &p in &img[ci * plane..(ci + 1) * plane] {
                    sq[ci] += (p as f64 / 255.0 - mean[ci]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    fn apply(&self, img: &[u8], plane: usize, out: &mut Vec<f64>) {
        for (ci, chunk) in img.chunks(plane).enumerate() {
            let (m, s) = (self.mean[ci], self.std[ci]);
            out.extend(chunk.iter().map(|&p| (p as f64 / 255.0 - m) / s));
        }
    }
}

/// Augmentation applied to normalized batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Zero padding before a random crop back to the original size; 0 disables.
    pub pad: usize,
    pub flip: bool,
    /// Side of the cutout square; `None` disables.
    pub cutout: Option<usize>,
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self { pad: 0, flip: false, cutout: None }
    }

    /// Pad 4, random crop, horizontal flip.
    pub fn standard() -> Self {
        Self { pad: 4, flip: true, cutout: None }
    }

    pub fn with_cutout(self, length: usize) -> Self {
        Self { cutout: Some(length), ..self }
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::standard()
    }
}

/// Mirrors one (C, H, W) image along the width axis.
pub fn flip_horizontal(img: &mut [f64], shape: [usize; 3]) {
    let [_, _, w] = shape;
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Shifts the image by (`oy - pad`, `ox - pad`) with zero fill: the crop at offset
/// (oy, ox) of the zero-padded image.
pub fn pad_crop(img: &mut [f64], shape: [usize; 3], pad: usize, oy: usize, ox: usize) {
    let [c, h, w] = shape;
    let src = img.to_vec();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + oy) as i64 - pad as i64;
                let sx = (x + ox) as i64 - pad as i64;
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                img[(ci * h + y) * w + x] = if inside { src[(ci * h + sy as usize) * w + sx as usize] } else { 0.0 };
            }
        }
    }
}

/// Zeroes the `length`-sided square centred at (cy, cx), clipped at the borders.
/// Returns the number of zeroed pixels per channel.
pub fn cutout_at(img: &mut [f64], shape: [usize; 3], length: usize, cy: usize, cx: usize) -> usize {
    let [c, h, w] = shape;
    let half = length / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + length - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + length - half).min(w));
    for ci in 0..c {
        for y in y0..y1 {
            img[(ci * h + y) * w + x0..(ci * h + y) * w + x1].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    (y1.saturating_sub(y0)) * (x1.saturating_sub(x0))
}

/// Cutout with a centre drawn uniformly over the image.
pub fn cutout<R: Rng + ?Sized>(img: &mut [f64], shape: [usize; 3], length: usize, rng: &mut R) -> usize {
    let cy = rng.gen_range(0..shape[1]);
    let cx = rng.gen_range(0..shape[2]);
    cutout_at(img, shape, length, cy, cx)
}

/// Applies `spec` in place to every image of an (N, C, H, W) batch.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor, spec: &AugmentSpec, rng: &mut R) {
    let s = batch.shape().to_vec();
    let shape = [s[1], s[2], s[3]];
    let per = shape.iter().product::<usize>();
    for img in batch.data_mut().chunks_mut(per) {
        if spec.pad > 0 {
            let oy = rng.gen_range(0..=2 * spec.pad);
            let ox = rng.gen_range(0..=2 * spec.pad);
            pad_crop(img, shape, spec.pad, oy, ox);
        }
        if spec.flip && rng.gen_bool(0.5) {
            flip_horizontal(img, shape);
        }
        if let Some(len) = spec.cutout {
            cutout(img, shape, len, rng);
        }
    }
}

/// Normalized (N, C, H, W) batch and labels for the given records.
pub fn make_batch(ds: &Dataset, indices: &[usize], norm: &Normalization) -> (Tensor, Vec<usize>) {
    let [c, h, w] = ds.shape;
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        norm.apply(ds.image(i), h * w, &mut data);
    }
    let t = Tensor::new([indices.len(), c, h, w], data).expect("batch shape matches data");
    (t, indices.iter().map(|&i| ds.labels[i] as usize).collect())
}

/// Shuffled record order for one epoch; a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "epoch-order", epoch));
    idx
}

/// Consecutive batches of `order`, the last one possibly short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

/// Fraction of `ds` a nearest-centroid classifier (on raw pixels, centroids from
/// `fit`) labels correctly.
pub fn nearest_centroid_accuracy(fit: &Dataset, ds: &Dataset) -> f64 {
    let per = fit.image_len();
    let mut centroids = vec![vec![0.0; per]; fit.classes];
    let mut counts = vec![0usize; fit.classes];
    for i in 0..fit.len() {
        let l = fit.labels[i] as usize;
        counts[l] += 1;
        centroids[l].iter_mut().zip(fit.image(i)).for_each(|(c, &p)| *c += p as f64);
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let hits = (0..ds.len())
        .filter(|&i| {
            let img = ds.image(i);
            let best = centroids
                .iter()
                .map(|c| c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            best == ds.labels[i] as usize
        })
        .count();
    hits as f64 / ds.len() as f64
}
