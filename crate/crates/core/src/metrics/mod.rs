//! Flow and text evaluation metrics.

mod eval;

use crate::error::{Error, Result};
use crate::flowest::mean_over_mask;
use crate::imagecore::{FlowField, RasterImage};
use crate::scalar::Scalar;

pub use crate::flowest::epe;
pub use eval::{evaluate_pipeline, rectification_psnr, EvalOptions, EvalReport, SampleRow, OCR_IMAGE_PLACEHOLDER};

/// Endpoint error with the displacement components divided by the flow
/// width and height.
pub fn nepe<T: Scalar>(a: &FlowField<T>, b: &FlowField<T>) -> Result<f64> {
    mean_over_mask(a, b, a.width() as f64, a.height() as f64)
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(s: &str, t: &str) -> usize {
    let t: Vec<char> = t.chars().collect();
    let mut row: Vec<usize> = (0..=t.len()).collect();
    for (i, a) in s.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &b) in t.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(a != b)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[t.len()]
}

/// `(1 - d / max(len)) * 100`. Not clamped; see [`ocr_accuracy_checked`].
pub fn ocr_accuracy(recognized: &str, truth: &str) -> Result<f64> {
    let n = recognized.chars().count().max(truth.chars().count());
    if n == 0 {
        return Err(Error::BothEmpty);
    }
    Ok((1.0 - levenshtein(recognized, truth) as f64 / n as f64) * 100.0)
}

/// Like [`ocr_accuracy`], also reporting whether the value went negative.
pub fn ocr_accuracy_checked(recognized: &str, truth: &str) -> Result<(f64, Option<String>)> {
    let acc = ocr_accuracy(recognized, truth)?;
    let warning = (acc < 0.0).then(|| format!("negative OCR accuracy {acc:.2}"));
    Ok((acc, warning))
}

/// Peak signal-to-noise ratio in dB over the pixels selected by `mask`
/// (all pixels when `None`), for samples in `[0, 1]`.
pub fn psnr(a: &RasterImage, b: &RasterImage, mask: Option<&[bool]>) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::DimMismatch("images differ in shape".into()));
    }
    let c = a.channels();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (i, (pa, pb)) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            for (x, y) in pa.iter().zip(pb) {
                sum += (*x as f64 - *y as f64).powi(2);
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Shrinks a mask by `radius` pixels (square structuring element); pixels
/// within `radius` of the border are dropped too.
pub fn erode_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (pos, len) = if horizontal { (x, width) } else { (y, height) };
                if pos < radius || pos + radius >= len {
                    continue;
                }
                out[y * width + x] = (pos - radius..=pos + radius).all(|k| {
                    let i = if horizontal { y * width + k } else { k * width + x };
                    src[i]
                });
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}
