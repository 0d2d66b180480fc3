//! Quantization and bit-plane pattern splitting.
//!
//! An image quantized to R bits per value splits, for a chosen K, into a
//! natural pattern (the top K bit-planes, low bits cleared) and a
//! perturbed pattern (the bottom R-K bit-planes). The two patterns occupy
//! disjoint bits, so addition reconstructs the original exactly: the split
//! loses nothing, it only relabels where each bit lives.
//!
//! All positions here are (channel, row, column), row-major.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest supported bit depth; values are stored in u16.
pub const MAX_DEPTH: u8 = 16;

/// Integer image with `depth` significant bits per value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantImage {
    depth: u8,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl QuantImage {
    pub fn new(
        depth: u8,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<u16>,
    ) -> Result<Self> {
        check_depth(depth)?;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dims ({channels},{height},{width}) must be positive"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image dims ({channels},{height},{width}) need {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        let limit = max_value(depth);
        if let Some(&bad) = data.iter().find(|&&v| v > limit) {
            return Err(Error::invalid(format!(
                "value {bad} exceeds {depth}-bit maximum {limit}"
            )));
        }
        Ok(QuantImage {
            depth,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    /// (channels, height, width).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn check_depth(depth: u8) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        Err(Error::invalid(format!(
            "bit depth {depth} out of range 1..={MAX_DEPTH}"
        )))
    } else {
        Ok(())
    }
}

/// Largest value representable at the given depth, e.g. 255 for 8 bits.
pub fn max_value(depth: u8) -> u16 {
    if depth as u32 == 16 {
        u16::MAX
    } else {
        (1u16 << depth) - 1
    }
}

/// Mask selecting the perturbed (low) bits for a split at K of R.
fn low_mask(depth: u8, k: u8) -> u16 {
    let low_bits = depth - k;
    if low_bits as u32 == 16 {
        u16::MAX
    } else {
        (1u16 << low_bits) - 1
    }
}

/// Rounds a continuous image in [0,1] to an R-bit integer image.
/// Halfway cases round up, so 0.5 at R=8 becomes 128.
pub fn quantize(x: &Tensor, depth: u8) -> Result<QuantImage> {
    check_depth(depth)?;
    let &[c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "quantize needs a [c,h,w] image, got shape {:?}",
            x.shape()
        )));
    };
    let m = max_value(depth) as f64;
    let mut data = Vec::with_capacity(x.numel());
    for &v in x.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "quantize input {v} outside [0,1]"
            )));
        }
        data.push((v * m).round() as u16);
    }
    QuantImage::new(depth, c, h, w, data)
}

/// Maps an R-bit image back to [0,1] by dividing by the maximum value.
pub fn dequantize(q: &QuantImage) -> Tensor {
    let m = max_value(q.depth) as f64;
    let (c, h, w) = q.dims();
    let data = q.data.iter().map(|&v| v as f64 / m).collect();
    Tensor::new(vec![c, h, w], data).expect("dims validated at construction")
}

/// Natural (top K planes) and perturbed (bottom R-K planes) halves of an
/// image. Their bits are disjoint, so natural + perturbed reconstructs
/// the source exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternPair {
    pub natural: QuantImage,
    pub perturbed: QuantImage,
    pub k: u8,
}

/// Splits an image at plane K: natural keeps the top K bits (low bits
/// zeroed in place), perturbed keeps the bottom R-K bits.
pub fn slice(q: &QuantImage, k: u8) -> Result<PatternPair> {
    if k > q.depth {
        return Err(Error::invalid(format!(
            "split plane {k} exceeds bit depth {}",
            q.depth
        )));
    }
    let mask = low_mask(q.depth, k);
    let natural: Vec<u16> = q.data.iter().map(|&v| v & !mask).collect();
    let perturbed: Vec<u16> = q.data.iter().map(|&v| v & mask).collect();
    let (c, h, w) = q.dims();
    Ok(PatternPair {
        natural: QuantImage::new(q.depth, c, h, w, natural)?,
        perturbed: QuantImage::new(q.depth, c, h, w, perturbed)?,
        k,
    })
}

/// Adds the two patterns back together. Rejects pairs whose bits are not
/// where the split at `pair.k` put them.
pub fn reconstruct(pair: &PatternPair) -> Result<QuantImage> {
    let q = &pair.natural;
    let p = &pair.perturbed;
    if q.depth != p.depth || q.dims() != p.dims() {
        return Err(Error::invalid(format!(
            "pattern pair mismatch: natural {:?}@{} vs perturbed {:?}@{}",
            q.dims(),
            q.depth,
            p.dims(),
            p.depth
        )));
    }
    if pair.k > q.depth {
        return Err(Error::invalid(format!(
            "split plane {} exceeds bit depth {}",
            pair.k, q.depth
        )));
    }
    let mask = low_mask(q.depth, pair.k);
    let mut data = Vec::with_capacity(q.numel());
    for (&n, &pv) in q.data.iter().zip(&p.data) {
        if n & mask != 0 {
            return Err(Error::invalid(format!(
                "natural value {n} has bits below plane {}",
                pair.k
            )));
        }
        if pv & !mask != 0 {
            return Err(Error::invalid(format!(
                "perturbed value {pv} has bits at or above plane {}",
                pair.k
            )));
        }
        data.push(n + pv);
    }
    let (c, h, w) = q.dims();
    QuantImage::new(q.depth, c, h, w, data)
}

/// Quantizes a continuous [n,c,h,w] batch, splits every value at K, and
/// returns the dequantized natural and perturbed batches. This is the
/// bridge the training loss uses; patterns re-enter the network as plain
/// inputs, so gradients never flow through the rounding.
pub fn slice_batch(batch: &Tensor, depth: u8, k: u8) -> Result<(Tensor, Tensor)> {
    check_depth(depth)?;
    if k > depth {
        return Err(Error::invalid(format!(
            "split plane {k} exceeds bit depth {depth}"
        )));
    }
    if batch.shape().len() != 4 {
        return Err(Error::invalid(format!(
            "slice_batch needs [n,c,h,w], got shape {:?}",
            batch.shape()
        )));
    }
    let m = max_value(depth) as f64;
    let mask = low_mask(depth, k);
    let mut nat = Vec::with_capacity(batch.numel());
    let mut pert = Vec::with_capacity(batch.numel());
    for &v in batch.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "slice_batch input {v} outside [0,1]"
            )));
        }
        let q = (v * m).round() as u16;
        nat.push((q & !mask) as f64 / m);
        pert.push((q & mask) as f64 / m);
    }
    Ok((
        Tensor::new(batch.shape().to_vec(), nat)?,
        Tensor::new(batch.shape().to_vec(), pert)?,
    ))
}

/// Fraction of positions whose natural pattern differs between a clean
/// batch and its adversarial counterpart, at split plane K.
pub fn discrepancy_ratio(clean: &[QuantImage], adv: &[QuantImage], k: u8) -> Result<f64> {
    if clean.len() != adv.len() {
        return Err(Error::invalid(format!(
            "batch sizes {} and {} differ",
            clean.len(),
            adv.len()
        )));
    }
    if clean.is_empty() {
        return Err(Error::invalid("discrepancy over an empty batch".to_string()));
    }
    let mut differing = 0usize;
    let mut total = 0usize;
    for (c, a) in clean.iter().zip(adv) {
        if c.depth != a.depth || c.dims() != a.dims() {
            return Err(Error::invalid(format!(
                "image mismatch: {:?}@{} vs {:?}@{}",
                c.dims(),
                c.depth,
                a.dims(),
                a.depth
            )));
        }
        if k > c.depth {
            return Err(Error::invalid(format!(
                "split plane {k} exceeds bit depth {}",
                c.depth
            )));
        }
        let mask = low_mask(c.depth, k);
        for (&cv, &av) in c.data.iter().zip(&a.data) {
            if cv & !mask != av & !mask {
                differing += 1;
            }
            total += 1;
        }
    }
    Ok(differing as f64 / total as f64)
}
