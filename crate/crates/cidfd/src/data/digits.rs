//! Procedural handwritten-style digit corpus in MNIST IDX layout.
//!
//! Ten stroke-based glyphs are rasterized at 28x28 with per-image random
//! affine jitter (rotation, scale, shear, translation), stroke thickness,
//! and ink intensity. The corpus stands in for the real MNIST files when
//! they are not available locally: it is written in the exact IDX format the
//! reader expects, so swapping in genuine MNIST files is a path change.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::core::seed::derive_seed;
use crate::data::idx::{self, IdxImages};
use crate::error::Result;

pub const SIDE: usize = 28;
pub const CLASSES: u32 = 10;
pub const IMAGES_FILE: &str = "train-images-idx3-ubyte";
pub const LABELS_FILE: &str = "train-labels-idx1-ubyte";

/// Writes a `count`-image digit corpus (images + labels) into `dir` using
/// the standard MNIST training-file names. Returns the two file paths.
/// Deterministic in `seed`.
pub fn write_digit_corpus(dir: &Path, count: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut pixels = vec![0u8; count * SIDE * SIDE];
    let mut labels = vec![0u8; count];
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "digit", i as u64));
        let label = rng.gen_range(0..CLASSES) as u8;
        labels[i] = label;
        let img = rasterize_digit(label, &mut rng);
        let base = i * SIDE * SIDE;
        for (dst, src) in pixels[base..base + SIDE * SIDE].iter_mut().zip(img.iter()) {
            *dst = (src * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let images_path = dir.join(IMAGES_FILE);
    let labels_path = dir.join(LABELS_FILE);
    idx::write_images(
        &images_path,
        &IdxImages {
            count,
            rows: SIDE,
            cols: SIDE,
            pixels,
        },
    )?;
    idx::write_labels(&labels_path, &labels)?;
    Ok((images_path, labels_path))
}

/// Renders one digit with random jitter into a 28x28 [0,1] buffer
/// (row-major).
fn rasterize_digit(label: u8, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let strokes = glyph_strokes(label);

    // affine jitter about the image center
    let angle = rng.gen_range(-0.20..0.20f32);
    let scale = rng.gen_range(0.80..1.10f32);
    let shear = rng.gen_range(-0.15..0.15f32);
    let dx = rng.gen_range(-1.5..1.5f32);
    let dy = rng.gen_range(-1.5..1.5f32);
    let half_width = rng.gen_range(0.8..1.3f32);
    let ink = rng.gen_range(0.78..1.0f32);

    let (sin, cos) = angle.sin_cos();
    let cx = SIDE as f32 / 2.0;
    let cy = SIDE as f32 / 2.0;
    let map = |(u, v): (f32, f32)| -> (f32, f32) {
        // glyph box: x in [5, 23], y in [4, 24]
        let x = 5.0 + u * 18.0 - cx;
        let y = 4.0 + v * 20.0 - cy;
        let x = x + shear * y;
        let (x, y) = (scale * (cos * x - sin * y), scale * (sin * x + cos * y));
        (x + cx + dx, y + cy + dy)
    };

    let mut buf = vec![0.0f32; SIDE * SIDE];
    for stroke in &strokes {
        let pts: Vec<(f32, f32)> = stroke.iter().map(|&p| map(p)).collect();
        for seg in pts.windows(2) {
            draw_segment(&mut buf, seg[0], seg[1], half_width, ink);
        }
    }
    buf
}

/// Anti-aliased thick segment via a distance field over its bounding box.
fn draw_segment(buf: &mut [f32], a: (f32, f32), b: (f32, f32), half_width: f32, ink: f32) {
    let pad = half_width + 1.5;
    let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + pad).ceil().min(SIDE as f32 - 1.0) as usize;
    let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + pad).ceil().min(SIDE as f32 - 1.0) as usize;
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let t = if len2 > 1e-12 {
                (((px - a.0) * abx + (py - a.1) * aby) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let qx = a.0 + t * abx;
            let qy = a.1 + t * aby;
            let dist = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
            let v = (half_width + 0.5 - dist).clamp(0.0, 1.0) * ink;
            let cell = &mut buf[y * SIDE + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Polyline arc on an ellipse, in glyph-box unit coordinates.
fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32, steps: usize) -> Vec<(f32, f32)> {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f32 / steps as f32).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke polylines per digit class, in unit coordinates (y grows downward).
fn glyph_strokes(label: u8) -> Vec<Vec<(f32, f32)>> {
    match label {
        0 => vec![arc(0.5, 0.5, 0.30, 0.42, 0.0, 360.0, 20)],
        1 => vec![vec![(0.35, 0.22), (0.52, 0.08), (0.52, 0.92)]],
        2 => {
            let mut top = arc(0.5, 0.30, 0.25, 0.20, 180.0, 340.0, 10);
            top.push((0.28, 0.88));
            vec![top, vec![(0.28, 0.90), (0.78, 0.90)]]
        }
        3 => vec![
            arc(0.47, 0.29, 0.24, 0.19, 150.0, 420.0, 12),
            arc(0.47, 0.70, 0.27, 0.22, -70.0, 210.0, 12),
        ],
        4 => vec![
            vec![(0.62, 0.08), (0.22, 0.62), (0.82, 0.62)],
            vec![(0.62, 0.30), (0.62, 0.92)],
        ],
        5 => {
            let mut bowl = vec![(0.70, 0.10), (0.30, 0.10), (0.30, 0.45)];
            bowl.extend(arc(0.47, 0.66, 0.26, 0.23, -90.0, 160.0, 12));
            vec![bowl]
        }
        6 => {
            let mut tail = vec![(0.66, 0.08)];
            tail.extend(arc(0.48, 0.66, 0.24, 0.25, -160.0, 200.0, 16));
            vec![tail]
        }
        7 => vec![vec![(0.24, 0.12), (0.76, 0.12), (0.42, 0.92)]],
        8 => vec![
            arc(0.5, 0.30, 0.21, 0.19, 0.0, 360.0, 16),
            arc(0.5, 0.70, 0.25, 0.22, 0.0, 360.0, 16),
        ],
        _ => {
            let mut tail = arc(0.5, 0.32, 0.22, 0.22, -20.0, 340.0, 16);
            tail.extend([(0.71, 0.40), (0.60, 0.92)]);
            vec![tail]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn corpus_matches_idx_contract() {
        let dir = tempdir().unwrap();
        let (imgs, labels) = write_digit_corpus(dir.path(), 64, 5).unwrap();
        let images = idx::read_images(&imgs).unwrap();
        let labels = idx::read_labels(&labels).unwrap();
        assert_eq!(images.count, 64);
        assert_eq!(images.rows, SIDE);
        assert_eq!(images.cols, SIDE);
        assert_eq!(labels.len(), 64);
        assert!(labels.iter().all(|&l| (l as u32) < CLASSES));
        // something was actually drawn
        assert!(images.pixels.iter().any(|&p| p > 128));
    }

    #[test]
    fn corpus_is_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        write_digit_corpus(d1.path(), 32, 7).unwrap();
        write_digit_corpus(d2.path(), 32, 7).unwrap();
        let a = std::fs::read(d1.path().join(IMAGES_FILE)).unwrap();
        let b = std::fs::read(d2.path().join(IMAGES_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_visually_distinct_on_average() {
        // coarse sanity check: mean images of different classes differ
        let dir = tempdir().unwrap();
        let (imgs, labels) = write_digit_corpus(dir.path(), 600, 13).unwrap();
        let images = idx::read_images(&imgs).unwrap();
        let labels = idx::read_labels(&labels).unwrap();
        let mut means = vec![vec![0.0f64; SIDE * SIDE]; 10];
        let mut counts = vec![0usize; 10];
        for (i, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            let base = i * SIDE * SIDE;
            for (m, &p) in means[l as usize].iter_mut().zip(&images.pixels[base..base + SIDE * SIDE]) {
                *m += p as f64 / 255.0;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            assert!(c > 20, "class undersampled: {c}");
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(dist > 1.0, "classes {a} and {b} are too similar ({dist})");
            }
        }
    }
}
