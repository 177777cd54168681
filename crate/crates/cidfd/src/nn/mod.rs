//! Minimal CNN building blocks with explicit forward/backward passes.
//!
//! Activations live in a `channels x (batch * height * width)` matrix
//! ([`FeatureMap`]), which lets convolution run as one im2col + GEMM per
//! layer and keeps every reduction in a fixed order — training is
//! bit-deterministic on a given machine. No autograd: each layer caches what
//! its backward pass needs, and composite networks chain the calls by hand.

pub mod layers;
pub mod nets;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

use crate::error::{Error, Result};

pub use layers::{Conv2d, GlobalAvgPool, GroupNorm2d, L2NormRows, Linear, MaxPool2d, Relu};
pub use nets::{BasicBlock, ConvBlock, ResNet18, SmallConvNet};

/// Activation tensor: `data[c][n * h * w + y * w + x]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array2<f32>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(data: Array2<f32>, n: usize, h: usize, w: usize) -> Result<Self> {
        if data.ncols() != n * h * w {
            return Err(Error::ShapeMismatch(format!(
                "feature map data has {} columns, expected {} * {} * {}",
                data.ncols(),
                n,
                h,
                w
            )));
        }
        Ok(Self { data, n, h, w })
    }

    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((c, n * h * w)),
            n,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }
}

/// One visitable tensor of a network: a learnable parameter with its
/// gradient accumulator, or a non-learnable buffer (normalization running
/// statistics).
pub enum Slot<'a> {
    Param {
        values: &'a mut [f32],
        grad: &'a mut [f32],
        shape: Vec<usize>,
    },
    Buffer {
        values: &'a mut [f32],
        shape: Vec<usize>,
    },
}

/// A trainable encoder backbone: image batch in, one row of features per
/// sample out.
pub trait Network {
    /// Training-mode forward: batch statistics, caches retained for
    /// [`Network::backward`], running statistics updated.
    fn forward_train(&mut self, x: FeatureMap) -> Result<Array2<f32>>;

    /// Inference-mode forward: running statistics, no caches, no mutation.
    fn forward_eval(&self, x: &FeatureMap) -> Result<Array2<f32>>;

    /// Accumulates parameter gradients from the gradient of the loss with
    /// respect to the most recent [`Network::forward_train`] output.
    fn backward(&mut self, grad_output: &Array2<f32>) -> Result<()>;

    /// Visits every parameter and buffer in a fixed order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>));

    /// Expected input layout `(channels, height, width)`.
    fn input_shape(&self) -> (usize, usize, usize);

    /// Output feature dimensionality d.
    fn output_dim(&self) -> usize;
}

/// SGD with momentum and weight decay: `v <- mu v + g + wd p; p <- p - lr v`.
/// Gradients are zeroed as part of the step.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn Network, lr: f32) {
        let mu = self.momentum;
        let wd = self.weight_decay;
        net.visit(&mut |name, slot| {
            if let Slot::Param { values, grad, .. } = slot {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; values.len()]);
                for ((p, g), vel) in values.iter_mut().zip(grad.iter_mut()).zip(v.iter_mut()) {
                    *vel = mu * *vel + *g + wd * *p;
                    *p -= lr * *vel;
                    *g = 0.0;
                }
            }
        });
    }
}

/// Zeroes all accumulated parameter gradients.
pub fn zero_grads(net: &mut dyn Network) {
    net.visit(&mut |_, slot| {
        if let Slot::Param { grad, .. } = slot {
            grad.fill(0.0);
        }
    });
}

/// SHA-256 over every parameter and buffer (little-endian bytes, visit
/// order); byte-identical weights give identical digests.
pub fn checksum(net: &mut dyn Network) -> String {
    let mut hasher = Sha256::new();
    net.visit(&mut |name, slot| {
        hasher.update(name.as_bytes());
        let values = match slot {
            Slot::Param { values, .. } => values,
            Slot::Buffer { values, .. } => values,
        };
        for v in values.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Collects `(name, shape, data)` for every parameter and buffer.
pub fn export_tensors(net: &mut dyn Network) -> Vec<crate::core::checkpoint::NamedTensor> {
    let mut out = Vec::new();
    net.visit(&mut |name, slot| {
        let (values, shape) = match slot {
            Slot::Param { values, shape, .. } => (&*values, shape),
            Slot::Buffer { values, shape } => (&*values, shape),
        };
        out.push(crate::core::checkpoint::NamedTensor::new(
            name,
            shape,
            values.to_vec(),
        ));
    });
    out
}

/// Restores parameters and buffers exported by [`export_tensors`].
pub fn import_tensors(
    net: &mut dyn Network,
    tensors: &[crate::core::checkpoint::NamedTensor],
) -> Result<()> {
    let by_name: HashMap<&str, &crate::core::checkpoint::NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut missing = Vec::new();
    net.visit(&mut |name, slot| {
        let (values, shape) = match slot {
            Slot::Param { values, shape, .. } => (values, shape),
            Slot::Buffer { values, shape } => (values, shape),
        };
        match by_name.get(name) {
            Some(t) if t.shape == shape && t.data.len() == values.len() => {
                values.copy_from_slice(&t.data);
            }
            _ => missing.push(name.to_string()),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Format {
            path: std::path::PathBuf::new(),
            reason: format!("checkpoint lacks tensors (or shapes differ): {missing:?}"),
        })
    }
}
