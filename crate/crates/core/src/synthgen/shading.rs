//! Smooth multiplicative shading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SyntheticSample;
use crate::error::{Error, Result};
use crate::imagecore::RasterImage;

/// Smooth random field spanning `[lo, 1]` with `lo` drawn from `[0.4, 0.7]`.
pub fn shading_field(width: usize, height: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ade_5ade);
    let lo = rng.random_range(0.4..0.7);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..1.2),
                rng.random_range(0.0..1.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let tilt = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let (wf, hf) = (width as f64, height as f64);
    let raw: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 / wf, (i / width) as f64 / hf);
            let waves: f64 = waves
                .iter()
                .map(|(a, fx, fy, p)| a * (std::f64::consts::TAU * (fx * x + fy * y) + p).cos())
                .sum();
            waves + tilt.0 * x + tilt.1 * y
        })
        .collect();
    let (min, max) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-12);
    raw.iter().map(|v| (lo + (1.0 - lo) * (v - min) / span) as f32).collect()
}

/// Multiplies every color channel (alpha excluded) by `field`.
pub fn apply_shading(img: &RasterImage, field: &[f32]) -> Result<RasterImage> {
    if field.len() != img.width() * img.height() {
        return Err(Error::DimMismatch(format!(
            "shading field has {} entries for a {}x{} image",
            field.len(),
            img.width(),
            img.height()
        )));
    }
    let c = img.channels();
    let color = if c == 4 { 3 } else { c };
    let mut out = img.clone();
    for (px, &s) in out.data_mut().chunks_exact_mut(c).zip(field) {
        px[..color].iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// The distorted image of `sample` under a seeded shading field.
pub fn generate_shaded<T>(sample: &SyntheticSample<T>, seed: u64) -> RasterImage {
    let img = &sample.distorted;
    let field = shading_field(img.width(), img.height(), seed);
    apply_shading(img, &field).expect("field matches image size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_range_and_smoothness() {
        let f = shading_field(200, 150, 3);
        let min = f.iter().copied().fold(f32::INFINITY, f32::min);
        let max = f.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(min >= 0.4 - 1e-6 && min <= 0.7 + 1e-6);
        assert!((max - 1.0).abs() < 1e-6);
        for y in 0..150 {
            for x in 1..200 {
                assert!((f[y * 200 + x] - f[y * 200 + x - 1]).abs() < 0.05);
            }
        }
        assert_eq!(f, shading_field(200, 150, 3));
        assert_ne!(f, shading_field(200, 150, 4));
    }

    #[test]
    fn unit_and_half_fields() {
        let img = RasterImage::from_fn(4, 3, 3, |x, y, c| (x + y + c) as f32 / 10.0).unwrap();
        assert_eq!(apply_shading(&img, &[1.0; 12]).unwrap(), img);
        let half = apply_shading(&img, &[0.5; 12]).unwrap();
        for (a, b) in half.luminance().iter().zip(img.luminance()) {
            assert!((a - b * 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn dividing_by_field_recovers_image() {
        let img = RasterImage::from_fn(30, 20, 3, |x, y, c| ((x * 3 + y * 5 + c) % 11) as f32 / 10.0).unwrap();
        let field = shading_field(30, 20, 9);
        let shaded = apply_shading(&img, &field).unwrap();
        for (i, (a, b)) in shaded.data().chunks(3).zip(img.data().chunks(3)).enumerate() {
            for c in 0..3 {
                assert!((a[c] / field[i] - b[c]).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn alpha_is_untouched() {
        let img = RasterImage::filled(2, 2, &[0.8, 0.6, 0.4, 0.9]).unwrap();
        let out = apply_shading(&img, &[0.5; 4]).unwrap();
        assert_eq!(out.pixel(1, 1), &[0.4, 0.3, 0.2, 0.9]);
    }
}
