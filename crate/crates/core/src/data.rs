//! Dataset files and minibatch sampling.
//!
//! IDX files (MNIST, Fashion-MNIST) are big-endian: a 4-byte magic
//! (`0x00000803` for images, `0x00000801` for labels), one 4-byte extent per
//! dimension, then unsigned bytes. Gzip-compressed files are detected by
//! their magic and inflated transparently. CIFAR-10 binary batches are
//! 3073-byte records: a label byte followed by 1024 red, 1024 green and 1024
//! blue pixels. Pixels load as `byte / 255`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Environment variable naming the data root.
pub const DATA_DIR_ENV: &str = "DPSGD_LAB_DATA_DIR";

/// The data root from the environment, or `./data`.
pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` in `[0, 1]` with one class id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub name: DatasetName,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, name: DatasetName) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels, name })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            name: self.name,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for &l in &self.labels {
            h[l as usize % 10] += 1;
        }
        h
    }

    /// Pixels back to bytes (`round(255 x)`).
    pub fn pixel_bytes(&self) -> Vec<u8> {
        self.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path.display(), 0, format!("bad gzip stream: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(source, offset as u64, "file ends inside the header"))
}

/// Parse an IDX file with the expected magic; returns `(dims, payload)`.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, source: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, source)?;
    if found != magic {
        return Err(Error::format(
            source,
            0,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d, source).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            source,
            bytes.len() as u64,
            format!("truncated payload: {need} bytes declared, {have} present"),
        ));
    }
    if have > need {
        return Err(Error::format(
            source,
            (start + need) as u64,
            format!("{} trailing bytes after the payload", have - need),
        ));
    }
    Ok((dims, &bytes[start..]))
}

fn scale(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Load an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: DatasetName) -> Result<Dataset> {
    let img_src = images_path.display().to_string();
    let lbl_src = labels_path.display().to_string();
    let img = read_all(images_path)?;
    let lbl = read_all(labels_path)?;
    let (dims, pixels) = parse_idx(&img, IDX_IMAGES_MAGIC, &img_src)?;
    let (ldims, labels) = parse_idx(&lbl, IDX_LABELS_MAGIC, &lbl_src)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(
            lbl_src,
            4,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(lbl_src, (8 + pos) as u64, format!("label {} out of range", labels[pos])));
    }
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], scale(pixels))?;
    Dataset::new(images, labels.to_vec(), name)
}

/// Load and concatenate CIFAR-10 binary batches.
pub fn load_cifar10(batch_paths: &[PathBuf]) -> Result<Dataset> {
    load_cifar10_head(batch_paths, usize::MAX)
}

/// Like [`load_cifar10`] but stops after `limit` records. The full training
/// set takes 1.2 GB as `f64`.
pub fn load_cifar10_head(batch_paths: &[PathBuf], limit: usize) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        if labels.len() >= limit {
            break;
        }
        let bytes = read_all(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path.display(),
                (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::format(
                    path.display(),
                    (r * CIFAR_RECORD) as u64,
                    format!("label {} out of range", rec[0]),
                ));
            }
            if labels.len() >= limit {
                break;
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, DatasetName::Cifar10)
}

fn find_file(dir: &Path, sub: &str, stem: &str) -> Result<PathBuf> {
    let candidates = [
        dir.join(sub).join(stem),
        dir.join(sub).join(format!("{stem}.gz")),
        dir.join(stem),
        dir.join(format!("{stem}.gz")),
    ];
    candidates.iter().find(|p| p.is_file()).cloned().ok_or_else(|| {
        Error::io(
            &candidates[0],
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{stem}[.gz] not found")),
        )
    })
}

/// Load a dataset split from a data root laid out as `mnist/`,
/// `fashion-mnist/` and `cifar-10-batches-bin/` (files directly in `dir`
/// are accepted too).
pub fn load_dataset(name: DatasetName, dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset_head(name, dir, split, usize::MAX)
}

/// The first `limit` samples of a split.
pub fn load_dataset_head(name: DatasetName, dir: &Path, split: Split, limit: usize) -> Result<Dataset> {
    let sub = name.subdir();
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = find_file(dir, sub, &format!("{prefix}-images-idx3-ubyte"))?;
            let labels = find_file(dir, sub, &format!("{prefix}-labels-idx1-ubyte"))?;
            let ds = load_idx(&images, &labels, name)?;
            Ok(if limit < ds.len() { ds.head(limit) } else { ds })
        }
        DatasetName::Cifar10 => {
            let stems: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Test => vec!["test_batch.bin".into()],
            };
            let paths = stems.iter().map(|s| find_file(dir, sub, s)).collect::<Result<Vec<_>>>()?;
            load_cifar10_head(&paths, limit)
        }
    }
}

/// Write an IDX image file (uncompressed).
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::dim(format!("{} pixels for {n}x{h}x{w}", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_bytes(path, &out)
}

/// Write a CIFAR-10 binary batch; `pixels` holds 3072 bytes per label.
pub fn write_cifar10(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * (CIFAR_RECORD - 1) {
        return Err(Error::dim(format!("{} pixels for {} records", pixels.len(), labels.len())));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks(CIFAR_RECORD - 1)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Number of batches in one Poisson-sampled epoch: `ceil(1/q)`.
pub fn poisson_epoch_len(q: f64) -> usize {
    // the slack keeps q = 1/k from rounding up to k + 1
    (1.0 / q - 1e-9).ceil().max(1.0) as usize
}

/// Poisson-sampled batches: each index joins each batch independently with
/// probability `q`.
#[derive(Clone, Debug)]
pub struct PoissonBatches {
    n: usize,
    q: f64,
    remaining: usize,
    rng: Rng,
}

impl Iterator for PoissonBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        if self.q >= 1.0 {
            return Some((0..self.n).collect());
        }
        // Geometric gaps between members: P(gap >= k) = (1-q)^k, which is
        // the same law as independent Bernoulli(q) draws per index.
        let log_keep = (-self.q).ln_1p();
        let mut batch = Vec::with_capacity((self.q * self.n as f64 * 1.2) as usize + 8);
        let mut i = 0usize;
        loop {
            let u = 1.0 - self.rng.next_f64();
            let gap = (u.ln() / log_keep).floor();
            if gap >= (self.n - i) as f64 {
                break;
            }
            i += gap as usize;
            batch.push(i);
            i += 1;
            if i >= self.n {
                break;
            }
        }
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for PoissonBatches {}

pub fn poisson_batches(n: usize, q: f64, epoch_rng: Rng) -> Result<PoissonBatches> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::arg(format!("sampling rate must be in (0, 1], got {q}")));
    }
    Ok(PoissonBatches {
        n,
        q,
        remaining: poisson_epoch_len(q),
        rng: epoch_rng,
    })
}

/// A uniform permutation of `0..n` cut into `ceil(n/b)` batches.
pub fn shuffle_batches(n: usize, b: usize, mut epoch_rng: Rng) -> Result<std::vec::IntoIter<Vec<usize>>> {
    if b == 0 {
        return Err(Error::arg("batch size must be >= 1"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    epoch_rng.shuffle(&mut perm);
    let batches: Vec<Vec<usize>> = perm.chunks(b).map(<[usize]>::to_vec).collect();
    Ok(batches.into_iter())
}
