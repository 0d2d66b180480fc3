//! Dataset ingestion and batching: the CIFAR-10 binary layout, the IDX
//! layout, a deterministic synthetic generator, and an augmenting batch
//! stream. Images are held quantized at 8 bits and dequantized to [0,1]
//! on the way out, so the attack budget keeps its meaning end to end.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitplane::{self, QuantImage};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Image depth of every dataset in this crate: byte pixels.
pub const DATA_DEPTH: u8 = 8;

/// CIFAR-10 record: one label byte, then 3072 channel-major pixels.
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

/// Pad width of the random-crop augmentation.
const CROP_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<QuantImage>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// Images must be homogeneous in geometry, 8-bit deep, and labeled
    /// below `class_count`.
    pub fn from_parts(
        images: Vec<QuantImage>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(first) = images.first() {
            let dims = first.dims();
            for (i, img) in images.iter().enumerate() {
                if img.depth() != DATA_DEPTH {
                    return Err(Error::invalid(format!(
                        "image {i} has depth {}, expected {DATA_DEPTH}",
                        img.depth()
                    )));
                }
                if img.dims() != dims {
                    return Err(Error::invalid(format!(
                        "image {i} has dims {:?}, expected {dims:?}",
                        img.dims()
                    )));
                }
            }
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &[QuantImage] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Channel/height/width of the images, if any exist.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|img| img.dims())
    }

    /// Split into a head of `at` examples and the tail. Both halves keep
    /// the class count; used to carve an evaluation split out of one
    /// generated set so both share the same class templates.
    pub fn split_at(mut self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.len() {
            return Err(Error::invalid(format!(
                "split at {at} leaves an empty half of a dataset of {}",
                self.len()
            )));
        }
        let tail_images = self.images.split_off(at);
        let tail_labels = self.labels.split_off(at);
        let tail = Dataset {
            images: tail_images,
            labels: tail_labels,
            class_count: self.class_count,
        };
        Ok((self, tail))
    }

    /// Dequantized [hi-lo, c, h, w] tensor of the index range.
    pub fn slice_tensor(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo >= hi || hi > self.len() {
            return Err(Error::invalid(format!(
                "range {lo}..{hi} invalid for dataset of {}",
                self.len()
            )));
        }
        let (c, h, w) = self.dims().expect("non-empty range implies images");
        let max = bitplane::max_value(DATA_DEPTH) as f64;
        let mut data = Vec::with_capacity((hi - lo) * c * h * w);
        for img in &self.images[lo..hi] {
            data.extend(img.data().iter().map(|&q| q as f64 / max));
        }
        Tensor::new(vec![hi - lo, c, h, w], data)
    }

    /// Seeded stream of dequantized batches.
    ///
    /// The shuffle is one seeded permutation of the epoch; augmentation
    /// (4-pixel zero pad, random crop, horizontal flip with probability
    /// one half) draws per image in stream order, so a fixed seed fixes
    /// the entire stream.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        shuffle: bool,
        augment: bool,
    ) -> Result<BatchStream<'_>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        Ok(BatchStream {
            ds: self,
            order,
            batch_size,
            augment,
            rng,
            pos: 0,
        })
    }
}

pub struct BatchStream<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
    pos: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let hi = (self.pos + self.batch_size).min(self.order.len());
        let picks = &self.order[self.pos..hi];
        self.pos = hi;

        let (c, h, w) = self.ds.dims().expect("stream over non-empty dataset");
        let max = bitplane::max_value(DATA_DEPTH) as f64;
        let mut data = Vec::with_capacity(picks.len() * c * h * w);
        let mut labels = Vec::with_capacity(picks.len());
        for &i in picks {
            let img = &self.ds.images[i];
            labels.push(self.ds.labels[i]);
            let base = data.len();
            data.extend(img.data().iter().map(|&q| q as f64 / max));
            if self.augment {
                let dy = self.rng.random_range(0..=2 * CROP_PAD);
                let dx = self.rng.random_range(0..=2 * CROP_PAD);
                let flip = self.rng.random_bool(0.5);
                crop_flip(&mut data[base..], c, h, w, dy, dx, flip);
            }
        }
        Some((
            Tensor::new(vec![picks.len(), c, h, w], data).expect("batch geometry is consistent"),
            labels,
        ))
    }
}

/// Zero-pad by `CROP_PAD`, take the window at (dy, dx), then flip
/// horizontally if asked. In place, per image.
fn crop_flip(img: &mut [f64], c: usize, h: usize, w: usize, dy: usize, dx: usize, flip: bool) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx_logical = if flip { w - 1 - x } else { x };
                let py = y + dy;
                let px = sx_logical + dx;
                let v = if (CROP_PAD..h + CROP_PAD).contains(&py)
                    && (CROP_PAD..w + CROP_PAD).contains(&px)
                {
                    src[(ch * h + (py - CROP_PAD)) * w + (px - CROP_PAD)]
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

/// One CIFAR-10 binary batch file: records of a label byte followed by
/// 3072 channel-major pixel bytes. An empty file is an empty dataset.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        return Err(Error::format(
            path.to_path_buf(),
            format!(
                "truncated record at byte offset {offset}: {} trailing bytes",
                bytes.len() - offset
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let offset = i * CIFAR_RECORD;
        let label = bytes[offset] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(
                path.to_path_buf(),
                format!("label {label} out of range at byte offset {offset}"),
            ));
        }
        let pixels: Vec<u16> = bytes[offset + 1..offset + CIFAR_RECORD]
            .iter()
            .map(|&b| b as u16)
            .collect();
        images.push(QuantImage::new(DATA_DEPTH, 3, 32, 32, pixels)?);
        labels.push(label);
    }
    Dataset::from_parts(images, labels, CIFAR_CLASSES)
}

/// The training and evaluation splits of a CIFAR-10 binary directory,
/// in its published file names.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ] {
        let part = load_cifar10_binary(&dir.join(name))?;
        images.extend(part.images);
        labels.extend(part.labels);
    }
    let train = Dataset::from_parts(images, labels, CIFAR_CLASSES)?;
    let eval = load_cifar10_binary(&dir.join("test_batch.bin"))?;
    Ok((train, eval))
}

/// Contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxContent {
    Labels(Vec<usize>),
    Images(Vec<QuantImage>),
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::format(path.to_path_buf(), format!("truncated header at byte {at}")))?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

/// One IDX file: big-endian magic 0x00000801 (label vector) or
/// 0x00000803 (image stack), big-endian u32 dimensions, then bytes.
pub fn load_idx(path: &Path) -> Result<IdxContent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    let rank = match magic {
        0x0000_0801 => 1,
        0x0000_0803 => 3,
        other => {
            return Err(Error::format(
                path.to_path_buf(),
                format!("bad magic 0x{other:08x} (expected 0x00000801 or 0x00000803)"),
            ))
        }
    };
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(read_be_u32(&bytes, 4 + 4 * d, path)? as usize);
    }
    let header = 4 + 4 * rank;
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| {
            Error::format(path.to_path_buf(), format!("dimension overflow: {dims:?}"))
        })?;
    let body = &bytes[header..];
    if body.len() != total {
        return Err(Error::format(
            path.to_path_buf(),
            format!(
                "payload of {} bytes does not match dimensions {dims:?} ({total} expected)",
                body.len()
            ),
        ));
    }
    match magic {
        0x0000_0801 => Ok(IdxContent::Labels(body.iter().map(|&b| b as usize).collect())),
        _ => {
            let (n, h, w) = (dims[0], dims[1], dims[2]);
            let mut images = Vec::with_capacity(n);
            for i in 0..n {
                let pixels: Vec<u16> = body[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|&b| b as u16)
                    .collect();
                images.push(QuantImage::new(DATA_DEPTH, 1, h, w, pixels)?);
            }
            Ok(IdxContent::Images(images))
        }
    }
}

fn idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Vec<QuantImage>, Vec<usize>)> {
    let IdxContent::Images(images) = load_idx(images_path)? else {
        return Err(Error::format(
            images_path.to_path_buf(),
            "expected an image file".to_string(),
        ));
    };
    let IdxContent::Labels(labels) = load_idx(labels_path)? else {
        return Err(Error::format(
            labels_path.to_path_buf(),
            "expected a label file".to_string(),
        ));
    };
    Ok((images, labels))
}

/// The training and evaluation splits of an IDX directory in the
/// standard file names. Class count is one past the largest label seen
/// in either split.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_images, train_labels) = idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (eval_images, eval_labels) = idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let classes = train_labels
        .iter()
        .chain(eval_labels.iter())
        .max()
        .map_or(1, |&m| m + 1);
    Ok((
        Dataset::from_parts(train_images, train_labels, classes)?,
        Dataset::from_parts(eval_images, eval_labels, classes)?,
    ))
}

/// Deterministic synthetic dataset: one random template per class,
/// examples are the template plus uniform pixel noise of up to 16/255,
/// labels round-robin. Separable by construction.
pub fn synth_dataset(seed: u64, n: usize, class_count: usize, side: usize) -> Result<Dataset> {
    if class_count == 0 || n < class_count {
        return Err(Error::invalid(format!(
            "need n >= class_count >= 1, got n={n}, class_count={class_count}"
        )));
    }
    if side < 8 {
        return Err(Error::invalid(format!(
            "side {side} too small: templates need at least 8 pixels of structure"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = side * side;
    let pixels = 3 * area;
    // One shared scene, two kinds of class signal. A 2x2 center patch
    // moves far enough (24/255) that no budget-8/255 attack can push
    // any of its pixels back through the 16/255 data noise, but the
    // patch lies about the class on a few percent of examples.
    // Whole-channel shifts of 6/255 are the opposite: never wrong and,
    // after spatial averaging, the cleanest signal in sight, yet a
    // budget above 6/255 flips them outright. Plain training maximizes
    // margin on the channel shifts and stays attackable; attack-aware
    // training falls back on the patch and pays the few percent it
    // misleads. Per-pixel 4/255 jitter keeps templates distinct in depth.
    let base: Vec<f64> = (0..pixels).map(|_| rng.random_range(0.2..=0.8)).collect();
    let mid = side / 2;
    let is_anchor = |i: usize| {
        let (r, c) = ((i % area) / side, i % side);
        (mid..mid + 2).contains(&r) && (mid..mid + 2).contains(&c)
    };
    let strong = 24.0 / 255.0;
    let channel_shift = 6.0 / 255.0;
    let weak = 4.0 / 255.0;
    let templates: Vec<Vec<f64>> = (0..class_count)
        .map(|c| {
            base.iter()
                .enumerate()
                .map(|(i, &b)| {
                    let mut v = if rng.random_range(0..2) == 0 {
                        b + weak
                    } else {
                        b - weak
                    };
                    if (c + i / area) % 2 == 0 {
                        v += channel_shift;
                    } else {
                        v -= channel_shift;
                    }
                    if is_anchor(i) {
                        v = if c % 2 == 0 { b + strong } else { b - strong };
                    }
                    v
                })
                .collect()
        })
        .collect();

    let noise = 16.0 / 255.0;
    let misleading_anchor = 0.08;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % class_count;
        let mut data: Vec<f64> = templates[label]
            .iter()
            .map(|&t| (t + rng.random_range(-noise..noise)).clamp(0.0, 1.0))
            .collect();
        if rng.random_range(0.0..1.0) < misleading_anchor {
            for (p, v) in data.iter_mut().enumerate() {
                if is_anchor(p) {
                    let wrong = if label % 2 == 0 {
                        base[p] - strong
                    } else {
                        base[p] + strong
                    };
                    *v = (wrong + rng.random_range(-noise..noise)).clamp(0.0, 1.0);
                }
            }
        }
        let t = Tensor::new(vec![3, side, side], data)?;
        images.push(bitplane::quantize(&t, DATA_DEPTH)?);
        labels.push(label);
    }
    Dataset::from_parts(images, labels, class_count)
}
