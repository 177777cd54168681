//! Random stripe-pattern generation: 28x28 binary-intensity band images in
//! four orientations, with random period, band width, and phase per image.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::core::seed::derive_seed;
use crate::data::LabeledImage;
use crate::error::{Error, Result};

pub const STRIPE_SIDE: usize = 28;
pub const STRIPE_CLASSES: u32 = 4;

/// Stripe orientation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal = 0,
    Vertical = 1,
    DiagonalDown = 2,
    DiagonalUp = 3,
}

impl Orientation {
    fn from_class(c: u32) -> Self {
        match c {
            0 => Orientation::Horizontal,
            1 => Orientation::Vertical,
            2 => Orientation::DiagonalDown,
            _ => Orientation::DiagonalUp,
        }
    }

    /// The stripe coordinate of pixel (row, col): pixels with equal
    /// coordinate lie on the same band.
    fn coordinate(self, row: usize, col: usize) -> usize {
        match self {
            // bands run horizontally: intensity depends only on the row
            Orientation::Horizontal => row,
            Orientation::Vertical => col,
            Orientation::DiagonalDown => row + col,
            // offset keeps the coordinate non-negative
            Orientation::DiagonalUp => row + STRIPE_SIDE - 1 - col,
        }
    }
}

/// Generates `count` stripe images, deterministic in `seed`.
///
/// Each image draws an orientation class in {0..4}, a band period in
/// [6, 14] px, a band width in [2, 5] px, and a phase in [0, period); pixels
/// on a band are 1.0, all others 0.0.
pub fn generate_stripes(count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if count == 0 {
        return Err(Error::InvalidParameter("stripe count must be positive".into()));
    }
    (0..count)
        .map(|i| Ok(stripe_image(derive_seed(seed, "stripe", i as u64))))
        .collect()
}

fn stripe_image(seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = rng.gen_range(0..STRIPE_CLASSES);
    let orientation = Orientation::from_class(class);
    let period = rng.gen_range(6..=14usize);
    let width = rng.gen_range(2..=5usize);
    let phase = rng.gen_range(0..period);
    let mut pixels = Array3::<f32>::zeros((STRIPE_SIDE, STRIPE_SIDE, 1));
    for row in 0..STRIPE_SIDE {
        for col in 0..STRIPE_SIDE {
            let t = orientation.coordinate(row, col);
            if (t + phase) % period < width {
                pixels[[row, col, 0]] = 1.0;
            }
        }
    }
    LabeledImage {
        pixels,
        target_label: None,
        background_label: Some(class),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn horizontal_images_have_identical_columns() {
        let images = generate_stripes(200, 3).unwrap();
        let mut checked = 0;
        for img in &images {
            if img.background_label == Some(Orientation::Horizontal as u32) {
                checked += 1;
                for row in 0..STRIPE_SIDE {
                    let first = img.pixels[[row, 0, 0]];
                    for col in 1..STRIPE_SIDE {
                        assert_eq!(img.pixels[[row, col, 0]], first);
                    }
                }
            }
        }
        assert!(checked > 0, "no horizontal samples among 200 draws");
    }

    #[test]
    fn all_four_classes_appear() {
        let images = generate_stripes(400, 11).unwrap();
        let classes: BTreeSet<u32> = images.iter().filter_map(|i| i.background_label).collect();
        assert_eq!(classes.len(), STRIPE_CLASSES as usize);
        assert!(classes.iter().all(|&c| c < STRIPE_CLASSES));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_stripes(50, 9).unwrap();
        let b = generate_stripes(50, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.background_label, y.background_label);
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn pixels_are_binary() {
        for img in generate_stripes(30, 21).unwrap() {
            for &p in img.pixels.iter() {
                assert!(p == 0.0 || p == 1.0);
            }
        }
    }

    #[test]
    fn rejects_zero_count() {
        assert!(generate_stripes(0, 1).is_err());
    }
}
