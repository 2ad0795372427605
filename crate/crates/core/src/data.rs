// SPDX-License-Identifier: Apache-2.0

//! Dataset loading (MNIST IDX, CIFAR-10 binary), stratified subsets and
//! seeded batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::NoiseKey;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Layer index used to key dataset shuffles, away from any network layer.
const SHUFFLE_LAYER: u32 = u32::MAX;

/// Images in `[0, 1]`, flattened `c, y, x`, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        shape: [usize; 3],
        classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let [channels, height, width] = shape;
        let len = channels * height * width;
        if len == 0 || images.len() != labels.len() * len {
            return Err(Error::CountMismatch {
                images: images.len() / len.max(1),
                labels: labels.len(),
            });
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("pixel values outside [0, 1]".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            channels,
            height,
            width,
            classes,
            images,
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

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the listed examples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Class-stratified subset of `size` examples.
    pub fn stratified(&self, size: usize, seed: u64) -> Result<Dataset> {
        Ok(self.select(&stratified_indices(&self.labels, self.classes, size, seed)?))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], path: &Path, expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x803`, `count × rows × cols` bytes) and its
/// IDX label file (`0x801`). Pixels are scaled by 1/255; the class count is
/// 10 or one more than the largest label, whichever is larger.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    check_magic(&img, images, IDX_IMAGES)?;
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    check_len(&img, images, 16 + count * rows * cols)?;

    let lab = read(labels)?;
    check_magic(&lab, labels, IDX_LABELS)?;
    let label_count = be_u32(&lab, 4, labels)? as usize;
    check_len(&lab, labels, 8 + label_count)?;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let pixels = img[16..16 + count * rows * cols]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let label_vec: Vec<usize> = lab[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let classes = label_vec.iter().max().map_or(10, |&m| (m + 1).max(10));
    let name = images.file_name().and_then(|n| n.to_str()).unwrap_or("idx").to_string();
    let split = if name.starts_with("t10k") { "test" } else { "train" };
    Dataset::new(name, split, [1, rows, cols], classes, pixels, label_vec)
}

/// Writes single-channel images and labels as an IDX pair (pixels rounded
/// to the nearest 1/255).
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.channels != 1 {
        return Err(Error::InvalidConfig("IDX images are single-channel".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.height as u32).to_be_bytes());
    img.extend_from_slice(&(ds.width as u32).to_be_bytes());
    img.extend(ds.images.iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    write_file(images, &img)?;
    write_file(labels, &lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads CIFAR-10 binary batches: records of one label byte followed by
/// 3×32×32 channel-planar pixel bytes.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::SizeNotMultipleOfRecord {
                path: path.clone(),
                size: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(rec[0]));
            images.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let split = match paths.first().and_then(|p| p.file_name()).and_then(|n| n.to_str()) {
        Some(n) if n.starts_with("test") => "test",
        _ => "train",
    };
    Dataset::new("cifar10", split, [3, CIFAR_SIDE, CIFAR_SIDE], 10, images, labels)
}

/// Indices of a class-stratified subset, ascending.
///
/// Every class gets `size / classes` examples, the remainder going one each
/// to the lowest-numbered classes. A class with too few examples gives all
/// it has and its shortfall is spread over the others the same way. Which
/// examples a class contributes is a seeded shuffle.
pub fn stratified_indices(labels: &[usize], classes: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > labels.len() {
        return Err(Error::SubsetTooLarge {
            requested: size,
            available: labels.len(),
        });
    }
    if size == labels.len() {
        return Ok((0..size).collect());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut quota = vec![0usize; classes];
    let mut remaining = size;
    loop {
        let open: Vec<usize> = (0..classes).filter(|&c| quota[c] < by_class[c].len()).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        let extra = remaining % open.len();
        for (rank, &c) in open.iter().enumerate() {
            let want = share + usize::from(rank < extra);
            let take = want.min(by_class[c].len() - quota[c]);
            quota[c] += take;
            remaining -= take;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = NoiseKey::new(seed, SHUFFLE_LAYER, u64::MAX, c as u64).stream(0);
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Batches of a seeded per-epoch permutation of `0..count`; the last batch
/// may be short.
pub fn epoch_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = NoiseKey::new(seed, SHUFFLE_LAYER, epoch, u64::MAX).stream(0);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A stratified subset together with its batching schedule.
#[derive(Debug, Clone)]
pub struct Batcher {
    pub subset: Dataset,
    pub batch_size: usize,
    pub seed: u64,
}

impl Batcher {
    /// Index batches (into `subset`) for one epoch.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        epoch_batches(self.subset.len(), self.batch_size, self.seed, epoch)
    }
}

pub fn subset_and_batch(ds: &Dataset, subset: usize, batch_size: usize, seed: u64) -> Result<Batcher> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    Ok(Batcher {
        subset: ds.stratified(subset, seed)?,
        batch_size,
        seed,
    })
}
