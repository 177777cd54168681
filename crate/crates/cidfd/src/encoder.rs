//! Trainable embedding functions mapping image batches to unit-sphere
//! features. Two reference architectures: `small_conv` for 28x28 grayscale
//! and `resnet18` for 224x224 RGB; both end in an L2-normalization layer.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::core::checkpoint::{self, NamedTensor};
use crate::core::FeatureBatch;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::nn::{self, nets, FeatureMap, Network, ResNet18, Sgd, SmallConvNet};

/// Supported architecture tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    SmallConv,
    Resnet18,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::SmallConv => "small_conv",
            Arch::Resnet18 => "resnet18",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "small_conv" => Ok(Arch::SmallConv),
            "resnet18" => Ok(Arch::Resnet18),
            other => Err(Error::InvalidParameter(format!(
                "unknown architecture tag {other:?} (expected small_conv or resnet18)"
            ))),
        }
    }
}

enum Backbone {
    SmallConv(SmallConvNet),
    Resnet18(Box<ResNet18>),
}

impl Backbone {
    fn as_network(&mut self) -> &mut dyn Network {
        match self {
            Backbone::SmallConv(n) => n,
            Backbone::Resnet18(n) => n.as_mut(),
        }
    }

    fn as_network_ref(&self) -> &dyn Network {
        match self {
            Backbone::SmallConv(n) => n,
            Backbone::Resnet18(n) => n.as_ref(),
        }
    }
}

/// An encoder: backbone weights, head to dimension d, architecture tag, and
/// a frozen flag. Frozen encoders only ever run the inference path, so
/// identical inputs give byte-identical outputs across calls.
pub struct Encoder {
    backbone: Backbone,
    arch: Arch,
    dim: usize,
    seed: u64,
    frozen: bool,
}

/// Builds an initialized, unfrozen encoder. The same `(tag, d, seed)` always
/// yields identical initial weights.
pub fn build_encoder(arch_tag: &str, dim: usize, seed: u64) -> Result<Encoder> {
    let arch = Arch::from_tag(arch_tag)?;
    if dim == 0 {
        return Err(Error::InvalidParameter("feature dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = match arch {
        Arch::SmallConv => Backbone::SmallConv(SmallConvNet::new(dim, &mut rng)),
        Arch::Resnet18 => Backbone::Resnet18(Box::new(ResNet18::new(dim, &mut rng))),
    };
    Ok(Encoder {
        backbone,
        arch,
        dim,
        seed,
        frozen: false,
    })
}

impl Encoder {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Expected input layout `(channels, height, width)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.backbone.as_network_ref().input_shape()
    }

    /// Inference-mode embedding: one unit-norm feature row per image, in
    /// input order. Deterministic; does not mutate the encoder.
    pub fn embed_rows(&self, images: &FeatureMap) -> Result<Array2<f32>> {
        nets::check_input(self.backbone.as_network_ref(), images)?;
        let rows = self.backbone.as_network_ref().forward_eval(images)?;
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "encoder produced non-finite activations".into(),
            ));
        }
        Ok(rows)
    }

    /// [`Encoder::embed_rows`] wrapped as a [`FeatureBatch`] with positional ids.
    pub fn embed(&self, images: &FeatureMap) -> Result<FeatureBatch<f32>> {
        let rows = self.embed_rows(images)?;
        let n = rows.nrows();
        FeatureBatch::new(rows, (0..n).collect())
    }

    /// Training-mode forward (batch statistics, caches for backward).
    /// Rejected on frozen encoders.
    pub fn forward_train(&mut self, images: FeatureMap) -> Result<Array2<f32>> {
        if self.frozen {
            return Err(Error::InvalidParameter(
                "training-mode forward on a frozen encoder".into(),
            ));
        }
        nets::check_input(self.backbone.as_network_ref(), &images)?;
        let rows = self.backbone.as_network().forward_train(images)?;
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "encoder produced non-finite activations".into(),
            ));
        }
        Ok(rows)
    }

    /// Accumulates parameter gradients for the latest training-mode forward.
    pub fn backward(&mut self, grad_output: &Array2<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidParameter(
                "backward on a frozen encoder".into(),
            ));
        }
        self.backbone.as_network().backward(grad_output)
    }

    pub fn sgd_step(&mut self, opt: &mut Sgd, lr: f32) {
        opt.step(self.backbone.as_network(), lr);
    }

    /// Scales all accumulated gradients so their global L2 norm does not
    /// exceed `max_norm`. No-op when already within bounds.
    pub fn clip_grad_norm(&mut self, max_norm: f32) {
        if max_norm <= 0.0 {
            return;
        }
        let mut sq = 0.0f64;
        self.backbone.as_network().visit(&mut |_, slot| {
            if let crate::nn::Slot::Param { grad, .. } = slot {
                for g in grad.iter() {
                    sq += (*g as f64) * (*g as f64);
                }
            }
        });
        let norm = sq.sqrt() as f32;
        if norm > max_norm {
            let scale = max_norm / norm;
            self.backbone.as_network().visit(&mut |_, slot| {
                if let crate::nn::Slot::Param { grad, .. } = slot {
                    for g in grad.iter_mut() {
                        *g *= scale;
                    }
                }
            });
        }
    }

    /// SHA-256 digest over all weights and statistics.
    pub fn checksum(&mut self) -> String {
        nn::checksum(self.backbone.as_network())
    }

    /// Saves weights and buffers in the float32-blob + JSON-manifest format,
    /// with architecture tag, dimension, seed, and epoch in the manifest.
    pub fn save(&mut self, stem: &Path, epoch: usize, extra: serde_json::Value) -> Result<()> {
        let tensors = nn::export_tensors(self.backbone.as_network());
        let meta = serde_json::json!({
            "kind": "encoder",
            "arch": self.arch.tag(),
            "d": self.dim,
            "seed": self.seed,
            "epoch": epoch,
            "frozen": self.frozen,
            "extra": extra,
        });
        checkpoint::save_tensors(stem, &tensors, meta)
    }

    /// Restores an encoder saved by [`Encoder::save`].
    pub fn load(stem: &Path) -> Result<(Encoder, serde_json::Value)> {
        let (tensors, meta) = checkpoint::load_tensors(stem)?;
        let arch = meta
            .get("arch")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::format(stem, "manifest lacks an arch tag"))?;
        let dim = meta
            .get("d")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(stem, "manifest lacks d"))? as usize;
        let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let frozen = meta.get("frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        let mut encoder = build_encoder(arch, dim, seed)?;
        nn::import_tensors(encoder.backbone.as_network(), &tensors)?;
        encoder.frozen = frozen;
        Ok((encoder, meta))
    }

    /// Collects parameter/buffer tensors (used by the trainer's combined
    /// checkpoints).
    pub fn export_tensors(&mut self, prefix: &str) -> Vec<NamedTensor> {
        nn::export_tensors(self.backbone.as_network())
            .into_iter()
            .map(|mut t| {
                t.name = format!("{prefix}.{}", t.name);
                t
            })
            .collect()
    }

    pub fn import_tensors(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        let strip: Vec<NamedTensor> = tensors
            .iter()
            .filter(|t| t.name.starts_with(&format!("{prefix}.")))
            .map(|t| {
                let mut t = t.clone();
                t.name = t.name[prefix.len() + 1..].to_string();
                t
            })
            .collect();
        nn::import_tensors(self.backbone.as_network(), &strip)
    }
}

/// Packs images (all of one shape) into the `(C, N*H*W)` activation layout.
pub fn pack_images<'a, I>(images: I, shape: (usize, usize, usize)) -> Result<FeatureMap>
where
    I: IntoIterator<Item = &'a LabeledImage>,
{
    let (h, w, c) = shape;
    let images: Vec<&LabeledImage> = images.into_iter().collect();
    let n = images.len();
    let mut map = FeatureMap::zeros(c, n, h, w);
    for (ni, img) in images.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "image {ni} has shape {:?}, expected {shape:?}",
                img.shape()
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    map.data[[ch, ni * h * w + y * w + x]] = img.pixels[[y, x, ch]];
                }
            }
        }
    }
    Ok(map)
}
