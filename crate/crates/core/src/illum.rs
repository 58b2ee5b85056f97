//! Photometric cleanup baselines and overlap blending of patch outputs.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{luma601, RasterImage};
use crate::patching::PatchGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IllumMode {
    #[default]
    None,
    Binarize,
    Deshade,
    /// Corrected image supplied from a file.
    External,
}

impl std::str::FromStr for IllumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "binarize" => Ok(Self::Binarize),
            "deshade" => Ok(Self::Deshade),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!("unknown illumination mode '{other}'"))),
        }
    }
}

/// Per-axis linear ramps over each overlap band. Along one axis a pixel is
/// covered by at most two patches whose ramps sum to one.
#[derive(Clone, Debug)]
pub struct BlendWeights {
    cols: Vec<Vec<f32>>,
    rows: Vec<Vec<f32>>,
    size: usize,
}

fn axis_ramps(origins: &[usize], size: usize) -> Vec<Vec<f32>> {
    let n = origins.len();
    (0..n)
        .map(|k| {
            let start = origins[k];
            (0..size)
                .map(|i| {
                    let x = start + i;
                    let mut w = 1.0f32;
                    if k > 0 && x < origins[k - 1] + size {
                        w = ramp(x, start, origins[k - 1] + size);
                    }
                    if k + 1 < n && x >= origins[k + 1] {
                        w = 1.0 - ramp(x, origins[k + 1], start + size);
                    }
                    w
                })
                .collect()
        })
        .collect()
}

/// Rising weight over the band `[lo, hi)`: 0 at `lo`, 1 at `hi - 1`.
fn ramp(x: usize, lo: usize, hi: usize) -> f32 {
    if hi - lo < 2 {
        0.5
    } else {
        (x - lo) as f32 / (hi - lo - 1) as f32
    }
}

impl BlendWeights {
    pub fn new(grid: &PatchGrid) -> Self {
        Self {
            cols: axis_ramps(grid.col_origins(), grid.patch_size),
            rows: axis_ramps(grid.row_origins(), grid.patch_size),
            size: grid.patch_size,
        }
    }

    /// Weight of patch `(row, col)` at patch-local `(x, y)`.
    pub fn weight(&self, row: usize, col: usize, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.size && y < self.size);
        self.cols[col][x] * self.rows[row][y]
    }
}

/// Convex combination of aligned patch images over their overlaps.
pub fn blend_patches(grid: &PatchGrid, patches: &[RasterImage]) -> Result<RasterImage> {
    if patches.len() != grid.len() {
        return Err(Error::CountMismatch { expected: grid.len(), actual: patches.len() });
    }
    let c = patches[0].channels();
    let s = grid.patch_size;
    if patches.iter().any(|p| p.width() != s || p.height() != s || p.channels() != c) {
        return Err(Error::DimMismatch(format!("every patch must be {s}x{s} with {c} channels")));
    }
    let weights = BlendWeights::new(grid);
    let (w, h) = (grid.image_width, grid.image_height);
    let mut data = vec![0.0f32; w * h * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let out = &mut row[x * c..(x + 1) * c];
            for &pi in grid.covering(x, y).iter() {
                let spec = &grid.patches()[pi];
                let (lx, ly) = (x - spec.origin_x, y - spec.origin_y);
                let wgt = weights.weight(spec.row, spec.col, lx, ly);
                if wgt == 0.0 {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(patches[pi].pixel(lx, ly)) {
                    *o += wgt * v;
                }
            }
        }
    });
    RasterImage::from_data(w, h, c, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SauvolaParams {
    /// Odd side length of the local window.
    pub window: usize,
    pub k: f64,
    /// Dynamic range of the standard deviation, in normalized units.
    pub r: f64,
}

impl Default for SauvolaParams {
    fn default() -> Self {
        Self { window: 31, k: 0.2, r: 0.5 }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += values[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + run;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let stride = w + 1;
    s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
}

/// Sauvola thresholding of the luminance: 0 for ink, 1 for background.
/// Windows are clipped at the image border.
pub fn sauvola_binarize(img: &RasterImage, params: &SauvolaParams) -> Result<RasterImage> {
    if params.window < 3 || params.window % 2 == 0 {
        return Err(Error::BadWindow(params.window));
    }
    let (w, h) = (img.width(), img.height());
    let lum: Vec<f64> = img.luminance().iter().map(|&v| v as f64).collect();
    let sq: Vec<f64> = lum.iter().map(|v| v * v).collect();
    let (s1, s2) = (integral(&lum, w, h), integral(&sq, w, h));
    let r = params.window / 2;
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for (x, o) in row.iter_mut().enumerate() {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let m = box_sum(&s1, w, x0, y0, x1, y1) / n;
            let var = (box_sum(&s2, w, x0, y0, x1, y1) / n - m * m).max(0.0);
            let t = m * (1.0 + params.k * (var.sqrt() / params.r - 1.0));
            *o = if lum[y * w + x] >= t { 1.0 } else { 0.0 };
        }
    });
    RasterImage::from_data(w, h, 1, out)
}

/// Radius of the window centered on `k` shrunk to stay inside `[0, len)`.
/// Symmetric windows keep linear ramps unbiased at the border.
fn inner_radius(k: usize, len: usize, r: usize) -> usize {
    r.min(k).min(len - 1 - k)
}

/// Sliding max (`dilate`) or min along rows or columns over centered
/// windows of radius `r`, shrunk near the border.
fn rank_filter(src: &[f32], w: usize, h: usize, r: usize, horizontal: bool, dilate: bool) -> Vec<f32> {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, k: usize| if horizontal { line * w + k } else { k * w + line };
    let better = |a: f32, b: f32| if dilate { a >= b } else { a <= b };
    let mut out = vec![0.0f32; src.len()];
    let columns: Vec<Vec<(usize, f32)>> = (0..lines)
        .into_par_iter()
        .map(|line| {
            let mut q: VecDeque<usize> = VecDeque::new();
            let mut res = Vec::with_capacity(len);
            let mut next = 0;
            for k in 0..len {
                let rk = inner_radius(k, len, r);
                let hi = k + rk;
                while next <= hi {
                    let v = src[at(line, next)];
                    while q.back().is_some_and(|&b| better(v, src[at(line, b)])) {
                        q.pop_back();
                    }
                    q.push_back(next);
                    next += 1;
                }
                while q.front().is_some_and(|&f| f + rk < k) {
                    q.pop_front();
                }
                res.push((at(line, k), src[at(line, *q.front().unwrap())]));
            }
            res
        })
        .collect();
    for (i, v) in columns.into_iter().flatten() {
        out[i] = v;
    }
    out
}

fn box_blur(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let vals: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    let s = integral(&vals, w, h);
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let ry = inner_radius(y, h, r);
        let (y0, y1) = (y - ry, y + ry + 1);
        for (x, o) in row.iter_mut().enumerate() {
            let rx = inner_radius(x, w, r);
            let (x0, x1) = (x - rx, x + rx + 1);
            *o = (box_sum(&s, w, x0, y0, x1, y1) / ((x1 - x0) * (y1 - y0)) as f64) as f32;
        }
    });
    out
}

/// Paper-background luminance: grayscale closing with a `(2r+1)` square,
/// then a box blur of the same radius. Windows shrink symmetrically at
/// the border.
pub fn estimate_background(img: &RasterImage, radius: usize) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let lum = img.luminance();
    let dilated = rank_filter(&rank_filter(&lum, w, h, radius, true, true), w, h, radius, false, true);
    let closed = rank_filter(&rank_filter(&dilated, w, h, radius, true, false), w, h, radius, false, false);
    box_blur(&closed, w, h, radius)
}

const MIN_BACKGROUND: f32 = 1e-2;

/// Divides the luminance by the estimated background. RGB is rescaled per
/// pixel, keeping channel ratios; the scale is capped so no channel clips.
pub fn remove_shading(img: &RasterImage, blur_radius: usize) -> Result<RasterImage> {
    if blur_radius < 8 {
        return Err(Error::Config(format!("blur radius must be at least 8, got {blur_radius}")));
    }
    let background = estimate_background(img, blur_radius);
    let c = img.channels();
    let color = if c == 4 { 3 } else { c };
    let mut out = img.clone();
    out.data_mut().par_chunks_mut(c).zip(&background).for_each(|(px, &b)| {
        let lum = if color == 1 { px[0] } else { luma601(px[0], px[1], px[2]) };
        if lum <= 0.0 {
            return;
        }
        let target = (lum / b.max(MIN_BACKGROUND)).min(1.0);
        let peak = px[..color].iter().copied().fold(0.0f32, f32::max);
        let scale = (target / lum).min(1.0 / peak);
        px[..color].iter_mut().for_each(|v| *v *= scale);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::build_grid;
    use crate::synthgen::{apply_shading, shading_field, test_page};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cut(img: &RasterImage, grid: &PatchGrid) -> Vec<RasterImage> {
        grid.patches()
            .iter()
            .map(|p| img.crop(p.origin_x, p.origin_y, p.size, p.size).unwrap())
            .collect()
    }

    #[test]
    fn blending_cut_patches_restores_image() {
        let img = RasterImage::from_fn(200, 150, 3, |x, y, c| ((x * 3 + y * 7 + c * 11) % 255) as f32 / 255.0).unwrap();
        let grid = build_grid(200, 150, 48).unwrap();
        let out = blend_patches(&grid, &cut(&img, &grid)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn two_patch_ramp() {
        // 96-wide patches on a 168-wide image overlap by 24 columns
        let grid = build_grid(168, 96, 96).unwrap();
        assert_eq!(grid.col_origins(), &[0, 72]);
        let black = RasterImage::filled(96, 96, &[0.0]).unwrap();
        let white = RasterImage::filled(96, 96, &[1.0]).unwrap();
        let out = blend_patches(&grid, &[black, white]).unwrap();
        assert_eq!(out.get(71, 10, 0), 0.0);
        assert_eq!(out.get(72, 10, 0), 0.0);
        assert_eq!(out.get(95, 10, 0), 1.0);
        for x in 72..95 {
            let expected = (x - 72) as f32 / 23.0;
            assert!((out.get(x, 40, 0) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_partition_unity_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let size = rng.random_range(8..64);
            let w = rng.random_range(size..300);
            let h = rng.random_range(size..300);
            let grid = build_grid(w, h, size).unwrap();
            let weights = BlendWeights::new(&grid);
            let mut acc = vec![0.0f64; w * h];
            for p in grid.patches() {
                for y in 0..size {
                    for x in 0..size {
                        acc[(p.origin_y + y) * w + p.origin_x + x] += weights.weight(p.row, p.col, x, y) as f64;
                    }
                }
            }
            assert!(acc.iter().all(|a| (a - 1.0).abs() <= 1e-5), "{w}x{h}/{size}");
        }
    }

    #[test]
    fn blend_count_mismatch() {
        let grid = build_grid(100, 100, 40).unwrap();
        assert!(matches!(
            blend_patches(&grid, &[RasterImage::filled(40, 40, &[0.0]).unwrap()]),
            Err(Error::CountMismatch { .. })
        ));
    }

    fn two_level(text: f32, paper: f32) -> RasterImage {
        RasterImage::from_fn(120, 80, 1, |x, y, _| {
            let ink = (y % 20 >= 8 && y % 20 < 12 && x % 30 < 20) || (x % 30 == 3 && y % 20 >= 4);
            if ink { text } else { paper }
        })
        .unwrap()
    }

    #[test]
    fn sauvola_constant_is_background() {
        for v in [0.0, 0.3, 1.0] {
            let img = RasterImage::filled(40, 30, &[v, v, v]).unwrap();
            let out = sauvola_binarize(&img, &SauvolaParams::default()).unwrap();
            assert!(out.data().iter().all(|&b| b == 1.0));
        }
    }

    #[test]
    fn sauvola_separates_text() {
        let img = two_level(0.05, 0.95);
        let out = sauvola_binarize(&img, &SauvolaParams::default()).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, if *i < 0.5 { 0.0 } else { 1.0 });
        }
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for (a, b) in [(0.1, 0.9), (0.2, 0.8), (0.15, 0.75)] {
            let scaled = sauvola_binarize(&two_level(a, b), &SauvolaParams::default()).unwrap();
            assert_eq!(scaled, out);
        }
    }

    #[test]
    fn sauvola_rejects_bad_windows() {
        let img = two_level(0.0, 1.0);
        for window in [1, 4, 30] {
            let p = SauvolaParams { window, ..Default::default() };
            assert!(matches!(sauvola_binarize(&img, &p), Err(Error::BadWindow(_))));
        }
    }

    #[test]
    fn rank_filters_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (23, 17);
        let src: Vec<f32> = (0..w * h).map(|_| rng.random()).collect();
        let got = rank_filter(&rank_filter(&src, w, h, 3, true, true), w, h, 3, false, true);
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::MIN;
                let (ry, rx) = (inner_radius(y, h, 3), inner_radius(x, w, 3));
                for yy in y - ry..=y + ry {
                    for xx in x - rx..=x + rx {
                        m = m.max(src[yy * w + xx]);
                    }
                }
                assert_eq!(got[y * w + x], m);
            }
        }
    }

    #[test]
    fn white_page_is_unchanged() {
        let img = RasterImage::filled(64, 64, &[1.0, 1.0, 1.0]).unwrap();
        let out = remove_shading(&img, 8).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn color_block_keeps_chromaticity() {
        let img = RasterImage::filled(50, 50, &[0.6, 0.2, 0.1]).unwrap();
        let out = remove_shading(&img, 8).unwrap();
        for px in out.data().chunks(3) {
            assert!((px[1] / px[0] - 0.2 / 0.6).abs() < 1e-6);
            assert!((px[2] / px[0] - 0.1 / 0.6).abs() < 1e-6);
        }
    }

    fn background_spread(img: &RasterImage, paper: &[bool]) -> f64 {
        let lum = img.luminance();
        let vals: Vec<f64> = lum.iter().zip(paper).filter(|(_, &p)| p).map(|(&v, _)| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    }

    #[test]
    fn deshading_flattens_background() {
        for seed in 0..3 {
            let page = test_page(seed as usize, 600, 800).unwrap();
            let paper: Vec<bool> = page.luminance().iter().map(|&v| v > 0.85).collect();
            let shaded = apply_shading(&page, &shading_field(600, 800, seed)).unwrap();
            let fixed = remove_shading(&shaded, 12).unwrap();
            let (before, after) = (background_spread(&shaded, &paper), background_spread(&fixed, &paper));
            assert!(after <= 0.5 * before, "seed {seed}: {before} -> {after}");
            let again = remove_shading(&fixed, 12).unwrap();
            let drift = again.data().iter().zip(fixed.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(drift <= 2.0 / 255.0, "idempotence drift {drift}");
        }
    }
}
