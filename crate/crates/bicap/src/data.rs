//! Dataset ingestion (CIFAR-10 binary batches, MNIST idx files),
//! normalization, and the standard 32x32 training augmentation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`, values start in `[0, 1]` and may be normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy the selected records into a batch tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut out = vec![0.0; idx.len() * stride];
        let src = self.images.data();
        let mut labels = Vec::with_capacity(idx.len());
        for (bi, &i) in idx.iter().enumerate() {
            out[bi * stride..(bi + 1) * stride].copy_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(&[idx.len(), c, h, w], out).expect("batch shape"), labels)
    }

    /// Keep the first `n` records (class-balanced for round-robin sources).
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        Dataset {
            images: Tensor::from_vec(&[n, c, h, w], self.images.data()[..n * stride].to_vec())
                .expect("truncate shape"),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (c, h, w) = self.image_dims();
        let plane = h * w;
        let n = self.len();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let data = self.images.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                mean[ci] += data[base..base + plane].iter().sum::<f64>();
            }
        }
        let m = (n * plane) as f64;
        for v in mean.iter_mut() {
            *v /= m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                std[ci] += data[base..base + plane].iter().map(|x| (x - mean[ci]) * (x - mean[ci])).sum::<f64>();
            }
        }
        for v in std.iter_mut() {
            *v = (*v / m).sqrt();
        }
        (mean, std)
    }
}

/// Channelwise `(x - mean) / std` in place.
pub fn normalize(ds: &mut Dataset, mean: &[f64], std: &[f64]) -> Result<()> {
    let (c, h, w) = ds.image_dims();
    if mean.len() != c || std.len() != c {
        return Err(Error::Shape(format!(
            "normalize expects {c} channel constants, got {}/{}",
            mean.len(),
            std.len()
        )));
    }
    if let Some(ci) = std.iter().position(|&s| s <= 0.0) {
        return Err(Error::Config(format!("zero std for channel {ci}")));
    }
    let plane = h * w;
    let n = ds.len();
    let data = ds.images.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, sd) = (mean[ci], std[ci]);
            for v in &mut data[base..base + plane] {
                *v = (*v - mu) / sd;
            }
        }
    }
    Ok(())
}

/// Standard 32x32 training augmentation: zero-pad 4 px, random crop back to
/// the original size, random horizontal flip with p = 0.5. Identity on
/// validation data.
pub fn augment(images: &mut Tensor, split: Split, rng: &mut ChaCha8Rng) {
    if split == Split::Val {
        return;
    }
    const PAD: usize = 4;
    let shape = images.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
    let mut canvas = vec![0.0; c * ph * pw];
    let data = images.data_mut();
    for ni in 0..n {
        let dy = rng.gen_range(0..=2 * PAD);
        let dx = rng.gen_range(0..=2 * PAD);
        let flip = rng.gen_bool(0.5);
        let img = &mut data[ni * c * h * w..(ni + 1) * c * h * w];
        canvas.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..c {
            for y in 0..h {
                let src = &img[(ci * h + y) * w..(ci * h + y + 1) * w];
                canvas[(ci * ph + y + PAD) * pw + PAD..(ci * ph + y + PAD) * pw + PAD + w]
                    .copy_from_slice(src);
            }
        }
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { dx + (w - 1 - x) } else { dx + x };
                    img[(ci * h + y) * w + x] = canvas[(ci * ph + y + dy) * pw + sx];
                }
            }
        }
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn parse_cifar_batch(bytes: &[u8], path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD} (truncated record)",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("{}: label byte {label} out of range", path.display())));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Load the published CIFAR-10 binary layout: five training batch files and
/// one test batch of records `label byte + 3072 pixel bytes` (RGB planes).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        parse_cifar_batch(&read_file(&path)?, &path, &mut train_images, &mut train_labels)?;
    }
    let mut val_images = Vec::new();
    let mut val_labels = Vec::new();
    let test_path = dir.join("test_batch.bin");
    parse_cifar_batch(&read_file(&test_path)?, &test_path, &mut val_images, &mut val_labels)?;

    let mk = |images: Vec<f64>, labels: Vec<usize>, split| -> Result<Dataset> {
        let n = labels.len();
        Ok(Dataset {
            images: Tensor::from_vec(&[n, 3, 32, 32], images)?,
            labels,
            class_count: CIFAR_CLASSES,
            split,
        })
    };
    Ok((mk(train_images, train_labels, Split::Train)?, mk(val_images, val_labels, Split::Val)?))
}

const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    let end = off + 4;
    if end > bytes.len() {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

fn parse_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expect = 16 + n * rows * cols;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "{}: expected {expect} bytes for {n} images of {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, rows, cols, data))
}

fn parse_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data(format!("{}: label payload truncated", path.display())));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load MNIST idx files (`train-*`/`t10k-*` pairs) into `[N,1,R,C]` datasets.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load_pair = |prefix: &str, split: Split| -> Result<Dataset> {
        let (n, rows, cols, images) = parse_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
        let labels = parse_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{prefix}: {n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("{prefix}: label {bad} out of range")));
        }
        Ok(Dataset {
            images: Tensor::from_vec(&[n, 1, rows, cols], images)?,
            labels,
            class_count: 10,
            split,
        })
    };
    Ok((load_pair("train", Split::Train)?, load_pair("t10k", Split::Val)?))
}
