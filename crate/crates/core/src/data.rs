//! Image datasets: IDX archives, synthetic class patterns, and seeded
//! batching with the 28→32 zero-pad and grayscale→RGB replication the
//! supernet expects.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Immutable image collection; pixels are stored as bytes and read as
/// `byte / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let plane = channels * height * width;
        if plane == 0 || pixels.len() != plane * labels.len() {
            return Err(Error::Consistency(format!(
                "{} pixel bytes for {} images of {channels}×{height}×{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidLabel {
                label: l as usize,
                classes,
            });
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..][..self.image_len()]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Per-channel mean and standard deviation of `byte / 255` over `indices`.
    pub fn channel_stats(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for &i in indices {
            for (c, px) in self.image(i).chunks_exact(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt()).max(1e-6) as f32)
            .collect();
        (mean.iter().map(|&m| m as f32).collect(), std)
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.into(),
            offset,
            detail: "truncated header".into(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image archive (`0x00000803`, count, rows, cols, bytes).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            path: path.into(),
            offset: bytes.len(),
            detail: format!("truncated pixel data: {n}×{rows}×{cols} needs {need} bytes after the header"),
        });
    }
    if body.len() > need {
        return Err(Error::Format {
            path: path.into(),
            offset: 16 + need,
            detail: "trailing bytes after pixel data".into(),
        });
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an IDX label archive (`0x00000801`, count, bytes).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            detail: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            path: path.into(),
            offset: 8 + body.len().min(n),
            detail: format!("header announces {n} labels, file holds {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

/// Loads a grayscale IDX image/label pair.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let lab = parse_idx_labels(&read_file(labels)?, labels)?;
    if lab.len() != n {
        return Err(Error::Format {
            path: labels.into(),
            offset: 4,
            detail: format!("{} labels for {n} images in {}", lab.len(), images.display()),
        });
    }
    Dataset::new(1, rows, cols, classes, pixels, lab)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a single-channel dataset as an IDX pair.
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if data.channels != 1 {
        return Err(Error::Config("IDX archives hold single-channel images".into()));
    }
    fs::write(images, encode_idx_images(data.len(), data.height, data.width, &data.pixels))
        .map_err(|e| Error::io(images, e))?;
    fs::write(labels, encode_idx_labels(&data.labels)).map_err(|e| Error::io(labels, e))
}

/// Class-conditional patterns: each class has a fixed random template of
/// Gaussian blobs; samples add a random brightness, a one-pixel jitter and
/// pixel noise. Labels cycle through the classes so every class appears.
pub fn synthetic_dataset(n: usize, classes: usize, hw: (usize, usize), seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > 256 || n < classes {
        return Err(Error::Config(format!("synthetic dataset needs 1 ≤ classes ≤ min(n, 256), got n={n}, classes={classes}")));
    }
    let (h, w) = hw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let mut t = vec![0.0f32; h * w];
            for _ in 0..3 {
                let cy = rng.random_range(0.0..h as f32);
                let cx = rng.random_range(0.0..w as f32);
                let r = rng.random_range(1.5..(h.min(w) as f32 / 4.0).max(2.0));
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        t[y * w + x] += (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
            let max = t.iter().cloned().fold(0.0, f32::max).max(1e-6);
            t.iter_mut().for_each(|v| *v /= max);
            t
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.08).expect("valid std");
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let gain = rng.random_range(0.7..1.0f32);
        let (dy, dx) = (rng.random_range(-1i32..=1), rng.random_range(-1i32..=1));
        let t = &templates[label];
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let (sy, sx) = (y - dy, x - dx);
                let base = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    t[sy as usize * w + sx as usize]
                } else {
                    0.0
                };
                let v = (gain * base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
        labels.push(label as u8);
    }
    Dataset::new(1, h, w, classes, pixels, labels)
}

/// A view of some samples of a shared dataset.
#[derive(Clone, Debug)]
pub struct Subset {
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl Subset {
    pub fn all(data: Arc<Dataset>) -> Self {
        let indices = (0..data.len()).collect();
        Subset { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The first `n` samples of this subset.
    pub fn truncated(&self, n: usize) -> Self {
        Subset {
            data: self.data.clone(),
            indices: self.indices[..n.min(self.indices.len())].to_vec(),
        }
    }
}

/// Disjoint train/validation split of one dataset: a seeded permutation with
/// the last `val_count` samples held out.
pub fn holdout_split(data: Arc<Dataset>, val_count: usize, seed: u64) -> Result<(Subset, Subset)> {
    if val_count == 0 || val_count >= data.len() {
        return Err(Error::Config(format!(
            "validation split of {val_count} from {} samples leaves an empty side",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000));
    let val = order.split_off(data.len() - val_count);
    Ok((
        Subset {
            data: data.clone(),
            indices: order,
        },
        Subset { data, indices: val },
    ))
}

/// Conversion from stored bytes to network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    /// Output side length; images are zero-padded (in pixel space) and centred.
    pub size: usize,
    /// Output channels; single-channel images are replicated.
    pub channels: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocess {
    /// Standardises with statistics of the given samples.
    pub fn fit(train: &Subset, size: usize, channels: usize) -> Self {
        let (mean, std) = train.data.channel_stats(&train.indices);
        Preprocess { size, channels, mean, std }
    }

    /// No standardisation: the output is `byte / 255`.
    pub fn identity(size: usize, channels: usize, source_channels: usize) -> Self {
        Preprocess {
            size,
            channels,
            mean: vec![0.0; source_channels],
            std: vec![1.0; source_channels],
        }
    }
}

/// Augmentation applied in pixel space before standardisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    /// Pad by this many zero pixels per side and crop back at a random offset.
    pub pad_crop: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, pad_crop: 0 };

    pub fn is_none(&self) -> bool {
        !self.flip && self.pad_crop == 0
    }
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(4).wrapping_add(stream));
    rng
}

/// Seeded mini-batches over a subset. With `shuffle`, the order is a
/// permutation drawn from `(seed, epoch)`; the last partial batch is kept.
pub struct Batches<'a> {
    subset: &'a Subset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    pre: &'a Preprocess,
    augment: Augment,
    rng: ChaCha8Rng,
}

impl<'a> Batches<'a> {
    pub fn new(
        subset: &'a Subset,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: u64,
        pre: &'a Preprocess,
        augment: Augment,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order = subset.indices.clone();
        if shuffle {
            order.shuffle(&mut epoch_rng(seed, epoch, 0));
        }
        Ok(Batches {
            subset,
            order,
            pos: 0,
            batch_size,
            pre,
            augment,
            rng: epoch_rng(seed, epoch, 1),
        })
    }

    /// Sample indices of every batch, in order, without decoding pixels.
    pub fn index_batches(&self) -> Vec<Vec<usize>> {
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let data = &self.subset.data;
        let (c_out, s) = (self.pre.channels, self.pre.size);
        let mut images = Tensor::zeros([idx.len(), c_out, s, s]);
        let mut labels = Vec::with_capacity(idx.len());
        let mut plane = vec![0.0f32; s * s];
        for (b, &i) in idx.iter().enumerate() {
            let (flip, dy, dx) = if self.augment.is_none() {
                (false, 0, 0)
            } else {
                let p = self.augment.pad_crop as i64;
                let flip = self.augment.flip && self.rng.random_bool(0.5);
                let dy = if p > 0 { self.rng.random_range(-p..=p) } else { 0 };
                let dx = if p > 0 { self.rng.random_range(-p..=p) } else { 0 };
                (flip, dy, dx)
            };
            let img = data.image(i);
            let (h, w) = (data.height, data.width);
            let (top, left) = ((s as i64 - h as i64) / 2, (s as i64 - w as i64) / 2);
            for c in 0..c_out {
                let src_c = c % data.channels;
                let src = &img[src_c * h * w..][..h * w];
                let (mean, std) = (self.pre.mean[src_c], self.pre.std[src_c]);
                plane.fill(0.0);
                for y in 0..s as i64 {
                    let sy = y + dy - top;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..s as i64 {
                        let xx = if flip { s as i64 - 1 - x } else { x };
                        let sx = xx + dx - left;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        plane[(y * s as i64 + x) as usize] = src[(sy * w as i64 + sx) as usize] as f32 / 255.0;
                    }
                }
                let dst = &mut images.data_mut()[(b * c_out + c) * s * s..][..s * s];
                for (d, &v) in dst.iter_mut().zip(&plane) {
                    *d = (v - mean) / std;
                }
            }
            labels.push(data.label(i));
        }
        Some(Batch { images, labels })
    }
}
