//! Stochastic input augmentation. Policies are pure per-sample functions of
//! `(image, seed)`, so augmentation parallelizes across samples and replays
//! exactly under a fixed seed.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImage;
use crate::error::{Error, Result};

/// Augmentation policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentPolicy {
    /// Pass-through.
    Identity,
    /// Zero-pad by `pad` pixels then take a random crop at the original
    /// size. The default view for 28x28 grayscale; no flips, since mirror
    /// images change digit identity.
    CropPad { pad: usize },
    /// Random resized crop, horizontal flip, color jitter, and random
    /// grayscale for natural images.
    Natural {
        min_crop: f32,
        flip_prob: f32,
        jitter: f32,
        grayscale_prob: f32,
    },
}

impl AugmentPolicy {
    pub fn crop_pad_default() -> Self {
        AugmentPolicy::CropPad { pad: 4 }
    }

    pub fn natural_default() -> Self {
        AugmentPolicy::Natural {
            min_crop: 0.3,
            flip_prob: 0.5,
            jitter: 0.4,
            grayscale_prob: 0.2,
        }
    }
}

/// Applies `policy` to one image. Output shape equals input shape and pixels
/// stay inside [0, 1]. Deterministic in `seed`.
pub fn augment(image: &LabeledImage, policy: AugmentPolicy, seed: u64) -> Result<LabeledImage> {
    let out_pixels = match policy {
        AugmentPolicy::Identity => image.pixels.clone(),
        AugmentPolicy::CropPad { pad } => crop_pad(&image.pixels, pad, seed),
        AugmentPolicy::Natural {
            min_crop,
            flip_prob,
            jitter,
            grayscale_prob,
        } => {
            if !(0.0..=1.0).contains(&min_crop) || min_crop == 0.0 {
                return Err(Error::InvalidParameter(
                    "min_crop must lie in (0, 1]".into(),
                ));
            }
            natural(&image.pixels, min_crop, flip_prob, jitter, grayscale_prob, seed)
        }
    };
    Ok(LabeledImage {
        pixels: out_pixels,
        target_label: image.target_label,
        background_label: image.background_label,
    })
}

fn crop_pad(pixels: &Array3<f32>, pad: usize, seed: u64) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off_y = rng.gen_range(0..=2 * pad);
    let off_x = rng.gen_range(0..=2 * pad);
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            // position in the padded canvas
            let sy = y as isize + off_y as isize - pad as isize;
            let sx = x as isize + off_x as isize - pad as isize;
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                for ch in 0..c {
                    out[[y, x, ch]] = pixels[[sy as usize, sx as usize, ch]];
                }
            }
        }
    }
    out
}

fn natural(
    pixels: &Array3<f32>,
    min_crop: f32,
    flip_prob: f32,
    jitter: f32,
    grayscale_prob: f32,
    seed: u64,
) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // random resized crop: pick an area fraction and aspect, then resample
    let area = rng.gen_range(min_crop..=1.0f32);
    let aspect = rng.gen_range(0.75..=1.3333f32);
    let ch_f = ((h as f32) * area.sqrt() / aspect.sqrt()).clamp(1.0, h as f32);
    let cw_f = ((w as f32) * area.sqrt() * aspect.sqrt()).clamp(1.0, w as f32);
    let crop_h = ch_f.round().max(1.0) as usize;
    let crop_w = cw_f.round().max(1.0) as usize;
    let top = rng.gen_range(0..=(h - crop_h));
    let left = rng.gen_range(0..=(w - crop_w));
    let flip = rng.gen::<f32>() < flip_prob;

    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            // bilinear sample inside the crop window
            let sy = top as f32 + (y as f32 + 0.5) / h as f32 * crop_h as f32 - 0.5;
            let sx_rel = (x as f32 + 0.5) / w as f32 * crop_w as f32 - 0.5;
            let sx = if flip {
                left as f32 + (crop_w as f32 - 1.0) - sx_rel
            } else {
                left as f32 + sx_rel
            };
            let y0 = sy.floor().clamp(0.0, h as f32 - 1.0) as usize;
            let x0 = sx.floor().clamp(0.0, w as f32 - 1.0) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f32).clamp(0.0, 1.0);
            let fx = (sx - x0 as f32).clamp(0.0, 1.0);
            for chn in 0..c {
                let v = pixels[[y0, x0, chn]] * (1.0 - fy) * (1.0 - fx)
                    + pixels[[y0, x1, chn]] * (1.0 - fy) * fx
                    + pixels[[y1, x0, chn]] * fy * (1.0 - fx)
                    + pixels[[y1, x1, chn]] * fy * fx;
                out[[y, x, chn]] = v;
            }
        }
    }

    // brightness / contrast jitter
    if jitter > 0.0 {
        let brightness = 1.0 + rng.gen_range(-jitter..=jitter);
        let contrast = 1.0 + rng.gen_range(-jitter..=jitter);
        let mean = out.mean().unwrap_or(0.0);
        out.mapv_inplace(|v| ((v - mean) * contrast + mean) * brightness);
    }
    if c == 3 && rng.gen::<f32>() < grayscale_prob {
        for y in 0..h {
            for x in 0..w {
                let luma = 0.299 * out[[y, x, 0]] + 0.587 * out[[y, x, 1]] + 0.114 * out[[y, x, 2]];
                for chn in 0..3 {
                    out[[y, x, chn]] = luma;
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn gray_image(side: usize) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        LabeledImage {
            pixels: Array3::from_shape_fn((side, side, 1), |_| rng.gen_range(0.0..1.0)),
            target_label: Some(3),
            background_label: Some(1),
        }
    }

    #[test]
    fn identity_leaves_image_unchanged() {
        let img = gray_image(28);
        let out = augment(&img, AugmentPolicy::Identity, 99).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.target_label, img.target_label);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = gray_image(28);
        let a = augment(&img, AugmentPolicy::crop_pad_default(), 7).unwrap();
        let b = augment(&img, AugmentPolicy::crop_pad_default(), 7).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = augment(&img, AugmentPolicy::natural_default(), 7).unwrap();
        let d = augment(&img, AugmentPolicy::natural_default(), 7).unwrap();
        assert_eq!(c.pixels, d.pixels);
    }

    #[test]
    fn crop_pad_preserves_shape_and_range() {
        let img = gray_image(28);
        for seed in 0..20 {
            let out = augment(&img, AugmentPolicy::crop_pad_default(), seed).unwrap();
            assert_eq!(out.pixels.dim(), (28, 28, 1));
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn natural_preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = LabeledImage {
            pixels: Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0)),
            target_label: None,
            background_label: None,
        };
        for seed in 0..20 {
            let out = augment(&img, AugmentPolicy::natural_default(), seed).unwrap();
            assert_eq!(out.pixels.dim(), (16, 16, 3));
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
