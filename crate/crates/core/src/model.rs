//! Compact convolutional classifier with an explicit feature extractor.
//!
//! The extractor is conv3x3(16)-relu-pool, conv3x3(32)-relu-pool,
//! flatten, dense(128); a linear head maps features to class logits.
//! Parameters live in plain tensors so the same weights can be recorded
//! onto any tape, and the heavy-ball SGD update touches them in a fixed
//! order for reproducibility.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{NodeId, Primitive, Tensor, ValueGraph};
use crate::{Error, Result};

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"F2AT";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Width of the feature vector produced by the extractor.
pub const FEATURE_DIM: usize = 128;

const CONV1_OUT: usize = 16;
const CONV2_OUT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive".to_string()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "spatial dims {}x{} must be positive multiples of 4 (two pooling stages)",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Flattened width after the two conv-pool stages.
    pub fn flat_dim(&self) -> usize {
        CONV2_OUT * (self.height / 4) * (self.width / 4)
    }
}

/// All learnable tensors, in declaration order. This order is the
/// contract for gradients, optimizer state, and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Number of parameter tensors.
pub const PARAM_COUNT: usize = 8;

impl NetworkParams {
    /// He-uniform initialization: weights uniform on [-a, a] with
    /// a = sqrt(6 / fan_in), biases zero. Weight tensors are drawn in
    /// declaration order from one seeded stream.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he_uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor {
            let a = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape, data).expect("shape is consistent by construction")
        };
        let c = config.in_channels;
        let conv1_w = he_uniform(vec![CONV1_OUT, c, 3, 3], c * 9);
        let conv2_w = he_uniform(vec![CONV2_OUT, CONV1_OUT, 3, 3], CONV1_OUT * 9);
        let flat = config.flat_dim();
        let fc_w = he_uniform(vec![flat, FEATURE_DIM], flat);
        let head_w = he_uniform(vec![FEATURE_DIM, config.num_classes], FEATURE_DIM);
        Ok(NetworkParams {
            config,
            conv1_w,
            conv1_b: Tensor::zeros(&[CONV1_OUT]),
            conv2_w,
            conv2_b: Tensor::zeros(&[CONV2_OUT]),
            fc_w,
            fc_b: Tensor::zeros(&[FEATURE_DIM]),
            head_w,
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; PARAM_COUNT] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; PARAM_COUNT] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Records every parameter as a leaf on the tape.
    pub fn insert(&self, g: &mut ValueGraph) -> GraphParams {
        GraphParams {
            ids: self.tensors().map(|t| g.leaf(t.clone())),
        }
    }
}

/// Tape handles for the eight parameter leaves, in declaration order.
#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub ids: [NodeId; PARAM_COUNT],
}

impl GraphParams {
    fn conv1_w(&self) -> NodeId {
        self.ids[0]
    }
    fn conv1_b(&self) -> NodeId {
        self.ids[1]
    }
    fn conv2_w(&self) -> NodeId {
        self.ids[2]
    }
    fn conv2_b(&self) -> NodeId {
        self.ids[3]
    }
    fn fc_w(&self) -> NodeId {
        self.ids[4]
    }
    fn fc_b(&self) -> NodeId {
        self.ids[5]
    }
    fn head_w(&self) -> NodeId {
        self.ids[6]
    }
    fn head_b(&self) -> NodeId {
        self.ids[7]
    }
}

/// Records the feature extractor on the tape: batch [n,c,h,w] to
/// features [n,128].
pub fn extractor(g: &mut ValueGraph, p: &GraphParams, x: NodeId) -> Result<NodeId> {
    let c1 = g.apply(Primitive::Conv2d { pad: 1 }, &[x, p.conv1_w()])?;
    let c1 = g.apply(Primitive::BiasAdd, &[c1, p.conv1_b()])?;
    let r1 = g.apply(Primitive::Relu, &[c1])?;
    let p1 = g.apply(Primitive::MaxPool2, &[r1])?;
    let c2 = g.apply(Primitive::Conv2d { pad: 1 }, &[p1, p.conv2_w()])?;
    let c2 = g.apply(Primitive::BiasAdd, &[c2, p.conv2_b()])?;
    let r2 = g.apply(Primitive::Relu, &[c2])?;
    let p2 = g.apply(Primitive::MaxPool2, &[r2])?;
    let fl = g.apply(Primitive::Flatten, &[p2])?;
    let fc = g.apply(Primitive::MatMul, &[fl, p.fc_w()])?;
    g.apply(Primitive::BiasAdd, &[fc, p.fc_b()])
}

/// Records the linear head: features [n,128] to logits [n,classes].
pub fn head(g: &mut ValueGraph, p: &GraphParams, features: NodeId) -> Result<NodeId> {
    let h = g.apply(Primitive::MatMul, &[features, p.head_w()])?;
    g.apply(Primitive::BiasAdd, &[h, p.head_b()])
}

/// Records extractor plus head; returns (features, logits) handles.
pub fn forward_on(g: &mut ValueGraph, p: &GraphParams, x: NodeId) -> Result<(NodeId, NodeId)> {
    let f = extractor(g, p, x)?;
    let l = head(g, p, f)?;
    Ok((f, l))
}

/// One-off forward pass on a throwaway tape.
pub fn forward(params: &NetworkParams, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = ValueGraph::new();
    let gp = params.insert(&mut g);
    let x = g.leaf(batch.clone());
    let (f, l) = forward_on(&mut g, &gp, x)?;
    Ok((g.tensor(f).clone(), g.tensor(l).clone()))
}

/// Row-wise argmax; ties break toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::invalid(format!(
            "argmax_rows needs [n,c], got shape {:?}",
            logits.shape()
        )));
    };
    let d = logits.data();
    Ok((0..n)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Predicted class per image.
pub fn predict(params: &NetworkParams, batch: &Tensor) -> Result<Vec<usize>> {
    let (_, logits) = forward(params, batch)?;
    argmax_rows(&logits)
}

/// Heavy-ball velocity per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    pub epoch: usize,
    pub base_lr: f64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, base_lr: f64) -> Self {
        OptimizerState {
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            epoch: 0,
            base_lr,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One heavy-ball step: v <- momentum v + (g + weight_decay p),
/// p <- p - lr v, applied to the eight tensors in declaration order.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != PARAM_COUNT {
        return Err(Error::invalid(format!(
            "{} gradients for {PARAM_COUNT} parameter tensors",
            grads.len()
        )));
    }
    if !lr.is_finite() || !momentum.is_finite() || !weight_decay.is_finite() {
        return Err(Error::invalid(
            "optimizer hyperparameters must be finite".to_string(),
        ));
    }
    let tensors = params.tensors_mut();
    for (i, (p, g)) in tensors.into_iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient {i} shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let v = &state.velocity[i];
        let new_v: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data().iter().zip(p.data()))
            .map(|(&vv, (&gv, &pv))| momentum * vv + (gv + weight_decay * pv))
            .collect();
        let new_p: Vec<f64> = p
            .data()
            .iter()
            .zip(&new_v)
            .map(|(&pv, &vv)| pv - lr * vv)
            .collect();
        state.velocity[i] = Tensor::new(v.shape().to_vec(), new_v)?;
        *p = Tensor::new(p.shape().to_vec(), new_p)?;
    }
    Ok(())
}

/// Step-decay schedule: the base rate is divided by 10 at each
/// milestone, where milestones are fractions of the total epoch count
/// rounded half-up to whole epochs.
pub fn lr_at_epoch(base: f64, epoch: usize, total_epochs: usize, milestones: &[f64]) -> f64 {
    let mut lr = base;
    for &frac in milestones {
        let at = (frac * total_epochs as f64).round() as usize;
        if epoch >= at {
            lr /= 10.0;
        }
    }
    lr
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes params: magic, version, config, then each tensor as
/// rank, dims, and little-endian f64 data, in declaration order.
pub fn checkpoint_bytes(params: &NetworkParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [
        params.config.in_channels,
        params.config.height,
        params.config.width,
        params.config.num_classes,
    ] {
        push_u32(&mut buf, v as u32);
    }
    for t in params.tensors() {
        push_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&buf).map_err(|e| match e {
        Error::Invalid(msg) => Error::format(path, msg),
        other => other,
    })
}

pub fn params_from_bytes(buf: &[u8]) -> Result<NetworkParams> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::invalid(format!(
                "truncated checkpoint: wanted {n} bytes at offset {pos}",
                pos = *pos
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().expect("length checked")))
    };

    let magic = take(&mut pos, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::invalid(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = NetworkConfig {
        in_channels: read_u32(&mut pos)? as usize,
        height: read_u32(&mut pos)? as usize,
        width: read_u32(&mut pos)? as usize,
        num_classes: read_u32(&mut pos)? as usize,
    };
    config.validate()?;

    let mut tensors = Vec::with_capacity(PARAM_COUNT);
    for _ in 0..PARAM_COUNT {
        let rank = read_u32(&mut pos)? as usize;
        if rank > 4 {
            return Err(Error::invalid(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size 8")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if pos != buf.len() {
        return Err(Error::invalid(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - pos
        )));
    }

    let expected: [(&str, Vec<usize>); PARAM_COUNT] = [
        ("conv1_w", vec![CONV1_OUT, config.in_channels, 3, 3]),
        ("conv1_b", vec![CONV1_OUT]),
        ("conv2_w", vec![CONV2_OUT, CONV1_OUT, 3, 3]),
        ("conv2_b", vec![CONV2_OUT]),
        ("fc_w", vec![config.flat_dim(), FEATURE_DIM]),
        ("fc_b", vec![FEATURE_DIM]),
        ("head_w", vec![FEATURE_DIM, config.num_classes]),
        ("head_b", vec![config.num_classes]),
    ];
    for (t, (name, shape)) in tensors.iter().zip(&expected) {
        if t.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "{name} has shape {:?}, expected {shape:?} for config {config:?}",
                t.shape()
            )));
        }
    }
    let mut it = tensors.into_iter();
    Ok(NetworkParams {
        config,
        conv1_w: it.next().expect("eight tensors"),
        conv1_b: it.next().expect("eight tensors"),
        conv2_w: it.next().expect("eight tensors"),
        conv2_b: it.next().expect("eight tensors"),
        fc_w: it.next().expect("eight tensors"),
        fc_b: it.next().expect("eight tensors"),
        head_w: it.next().expect("eight tensors"),
        head_b: it.next().expect("eight tensors"),
    })
}
