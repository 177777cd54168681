//! Dataset construction and ingestion: the synthetic striped-digit target /
//! stripe background pair, the bit-exact IDX reader, generic image-directory
//! loading, and PNG + CSV persistence of generated datasets.

pub mod augment;
pub mod digits;
pub mod idx;
pub mod stripes;

use ndarray::Array3;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::core::seed::derive_seed;
use crate::error::{Error, Result};

pub use augment::{augment, AugmentPolicy};
pub use stripes::generate_stripes;

/// One image with optional target (class of interest) and background
/// (nuisance pattern) labels. Pixels are H x W x C reals in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Array3<f32>,
    pub target_label: Option<u32>,
    pub background_label: Option<u32>,
}

impl LabeledImage {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

/// Whether a dataset plays the target or the background role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Background,
}

/// Summary of a dataset: role, size, shape, class count, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub role: Role,
    pub size: usize,
    pub shape: (usize, usize, usize),
    /// Number of target classes; background datasets may have none.
    pub class_count: Option<usize>,
    pub source: String,
}

/// A dataset held in memory: its spec plus the images in order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn target_labels(&self) -> Option<Vec<usize>> {
        self.images
            .iter()
            .map(|i| i.target_label.map(|l| l as usize))
            .collect()
    }

    pub fn background_labels(&self) -> Option<Vec<usize>> {
        self.images
            .iter()
            .map(|i| i.background_label.map(|l| l as usize))
            .collect()
    }

    fn from_images(role: Role, images: Vec<LabeledImage>, source: String) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidParameter("dataset is empty".into()));
        };
        let shape = first.shape();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
        }
        let classes: BTreeSet<u32> = images.iter().filter_map(|i| i.target_label).collect();
        let class_count = if classes.is_empty() {
            None
        } else {
            Some(classes.len())
        };
        Ok(Dataset {
            spec: DatasetSpec {
                role,
                size: images.len(),
                shape,
                class_count,
                source,
            },
            images,
        })
    }
}

/// Pixelwise maximum of a digit image and a stripe image. The target label
/// comes from the digit, the background label from the stripe; both patterns
/// stay fully salient.
pub fn composite(digit: &LabeledImage, stripe: &LabeledImage) -> Result<LabeledImage> {
    if digit.shape() != stripe.shape() {
        return Err(Error::ShapeMismatch(format!(
            "digit {:?} vs stripe {:?}",
            digit.shape(),
            stripe.shape()
        )));
    }
    let mut pixels = digit.pixels.clone();
    pixels
        .iter_mut()
        .zip(stripe.pixels.iter())
        .for_each(|(d, &s)| *d = d.max(s));
    Ok(LabeledImage {
        pixels,
        target_label: digit.target_label,
        background_label: stripe.background_label,
    })
}

/// Background corpus size of the full-scale construction; scaled runs take
/// `round(scale * 10000)` fresh stripes.
pub const FULL_BACKGROUND_SIZE: usize = 10_000;

/// Builds the striped-digit experiment pair from an MNIST-layout IDX corpus.
///
/// Every digit image is composited (pixelwise max) with a freshly generated
/// stripe; the background dataset consists of stripes that were *not* used
/// in the composition. `scale` subsamples both sides proportionally: the
/// first `round(scale * corpus)` digits and `round(scale * 10000)` background
/// stripes. Deterministic in `(mnist_dir, seed)`.
pub fn build_stripe_mnist(mnist_dir: &Path, seed: u64, scale: f64) -> Result<(Dataset, Dataset)> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "scale must lie in (0, 1], got {scale}"
        )));
    }
    let images_path = mnist_dir.join(digits::IMAGES_FILE);
    let labels_path = mnist_dir.join(digits::LABELS_FILE);
    let images = idx::read_images(&images_path)?;
    let labels = idx::read_labels(&labels_path)?;
    if images.count != labels.len() {
        return Err(Error::format(
            &labels_path,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    if images.count == 0 {
        return Err(Error::format(&images_path, "empty image corpus"));
    }
    let n_target = ((images.count as f64) * scale).round().max(1.0) as usize;
    let n_background = ((FULL_BACKGROUND_SIZE as f64) * scale).round().max(1.0) as usize;

    let target_stripes = generate_stripes(n_target, derive_seed(seed, "target-stripes", 0))?;
    let plane = images.rows * images.cols;
    let mut target_images = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let mut pixels = Array3::<f32>::zeros((images.rows, images.cols, 1));
        let base = i * plane;
        for r in 0..images.rows {
            for c in 0..images.cols {
                pixels[[r, c, 0]] = images.pixels[base + r * images.cols + c] as f32 / 255.0;
            }
        }
        let digit = LabeledImage {
            pixels,
            target_label: Some(labels[i] as u32),
            background_label: None,
        };
        target_images.push(composite(&digit, &target_stripes[i])?);
    }

    // Fresh stripes, disjoint stream from the ones used in the composites.
    let background_images =
        generate_stripes(n_background, derive_seed(seed, "background-stripes", 0))?;

    let target = Dataset::from_images(
        Role::Target,
        target_images,
        format!("stripe-mnist:{}", mnist_dir.display()),
    )?;
    let background = Dataset::from_images(Role::Background, background_images, "stripes".into())?;
    Ok((target, background))
}

/// Manifest file name used by [`save_dataset`] / [`load_image_dir`].
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Persists a dataset as PNG files plus a CSV manifest with columns
/// `filename,target_label,background_label` (labels left empty when absent).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digits_width = dataset.len().to_string().len().max(5);
    let mut manifest = String::from("filename,target_label,background_label\n");
    for (i, img) in dataset.images.iter().enumerate() {
        let name = format!("img_{i:0digits_width$}.png");
        write_png(&dir.join(&name), &img.pixels)?;
        let tl = img.target_label.map_or(String::new(), |l| l.to_string());
        let bl = img.background_label.map_or(String::new(), |l| l.to_string());
        manifest.push_str(&format!("{name},{tl},{bl}\n"));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))
}

fn write_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(pixels[[y, x, 0]])]));
                }
            }
            buf.save(path)
                .map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        to_u8(pixels[[y, x, 0]]),
                        to_u8(pixels[[y, x, 1]]),
                        to_u8(pixels[[y, x, 2]]),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path)
                .map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
        }
        other => Err(Error::ShapeMismatch(format!(
            "png export supports 1 or 3 channels, got {other}"
        ))),
    }
}

/// Loads a dataset from a directory of images plus a CSV manifest.
///
/// The manifest must have a `filename` column; `target_label` and
/// `background_label` columns are optional (a missing column or empty cell
/// leaves the label absent). Images are decoded, optionally resized to
/// `resize` (height, width), and scaled to [0, 1].
pub fn load_image_dir(
    dir: &Path,
    manifest: &Path,
    role: Role,
    resize: Option<(usize, usize)>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::format(manifest, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(manifest, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let Some(file_col) = col("filename") else {
        return Err(Error::format(manifest, "manifest lacks a `filename` column"));
    };
    let tl_col = col("target_label");
    let bl_col = col("background_label");

    let mut images = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(manifest, e.to_string()))?;
        let Some(name) = record.get(file_col).filter(|s| !s.is_empty()) else {
            return Err(Error::format(
                manifest,
                format!("row {} has an empty filename", row_idx + 1),
            ));
        };
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::format(
                manifest,
                format!("row {} names a missing file: {}", row_idx + 1, path.display()),
            ));
        }
        let decoded = image::open(&path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let decoded = match resize {
            Some((h, w)) => decoded.resize_exact(
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            ),
            None => decoded,
        };
        let parse_label = |idx: Option<usize>| -> Result<Option<u32>> {
            let Some(idx) = idx else { return Ok(None) };
            let Some(cell) = record.get(idx).filter(|s| !s.is_empty()) else {
                return Ok(None);
            };
            cell.parse::<u32>().map(Some).map_err(|_| {
                Error::format(
                    manifest,
                    format!("row {} has a non-integer label {cell:?}", row_idx + 1),
                )
            })
        };
        let pixels = decode_pixels(&decoded);
        images.push(LabeledImage {
            pixels,
            target_label: parse_label(tl_col)?,
            background_label: parse_label(bl_col)?,
        });
    }
    Dataset::from_images(role, images, format!("image-dir:{}", dir.display()))
}

fn decode_pixels(decoded: &image::DynamicImage) -> Array3<f32> {
    match decoded {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            })
        }
    }
}
