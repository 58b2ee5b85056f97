//! Backward-mapping resampler: each output pixel `q` searches the source
//! point `p` with `p + F(p) = q` by fixed-point iteration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{luma601, FlowField, RasterImage};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleOptions {
    pub max_iterations: usize,
    /// Step length below which the search is considered converged, in pixels.
    pub tolerance: f64,
    /// RGB fill for pixels without a source.
    pub fill: [f32; 3],
}

impl Default for ResampleOptions {
    fn default() -> Self {
        Self { max_iterations: 32, tolerance: 0.05, fill: [1.0; 3] }
    }
}

impl ResampleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config("resample needs max_iterations >= 1 and tolerance > 0".into()));
        }
        Ok(())
    }

    fn fill_for(&self, channels: usize) -> Vec<f32> {
        match channels {
            1 => vec![luma601(self.fill[0], self.fill[1], self.fill[2])],
            3 => self.fill.to_vec(),
            _ => vec![self.fill[0], self.fill[1], self.fill[2], 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardMap {
    Mapped { x: f64, y: f64, iterations: usize },
    Diverged,
}

impl BackwardMap {
    pub fn point(&self) -> Option<(f64, f64)> {
        match *self {
            BackwardMap::Mapped { x, y, .. } => Some((x, y)),
            BackwardMap::Diverged => None,
        }
    }
}

/// Source point whose forward flow lands on `(qx, qy)`.
pub fn backward_map<T: Scalar>(flow: &FlowField<T>, qx: f64, qy: f64, opts: &ResampleOptions) -> BackwardMap {
    invert_with(qx, qy, opts, |px, py| {
        let (u, v) = flow.sample_bilinear(T::of(px), T::of(py));
        (u.f64(), v.f64())
    })
}

/// Fixed-point search `p <- q - F(p)` for an arbitrary displacement function.
pub fn invert_with(qx: f64, qy: f64, opts: &ResampleOptions, flow: impl Fn(f64, f64) -> (f64, f64)) -> BackwardMap {
    let (mut px, mut py) = (qx, qy);
    let tol2 = opts.tolerance * opts.tolerance;
    for it in 1..=opts.max_iterations {
        let (u, v) = flow(px, py);
        let (nx, ny) = (qx - u, qy - v);
        let step = (nx - px).powi(2) + (ny - py).powi(2);
        px = nx;
        py = ny;
        if !(px.is_finite() && py.is_finite()) {
            return BackwardMap::Diverged;
        }
        if step <= tol2 {
            return BackwardMap::Mapped { x: px, y: py, iterations: it };
        }
    }
    BackwardMap::Diverged
}

#[derive(Clone, Debug)]
pub struct Rectified {
    pub image: RasterImage,
    /// True where the output pixel received a source color.
    pub coverage: Vec<bool>,
    pub diverged: usize,
    pub out_of_bounds: usize,
}

/// Rectified image; see [`rectify_with_coverage`].
pub fn rectify_image<T: Scalar>(src: &RasterImage, flow: &FlowField<T>, opts: &ResampleOptions) -> Result<RasterImage> {
    Ok(rectify_with_coverage(src, flow, opts)?.image)
}

/// Samples `src` bilinearly at the backward-mapped point of every output
/// pixel. Diverged searches, points outside the source and masked-out
/// source pixels receive `opts.fill`.
pub fn rectify_with_coverage<T: Scalar>(
    src: &RasterImage,
    flow: &FlowField<T>,
    opts: &ResampleOptions,
) -> Result<Rectified> {
    opts.validate()?;
    let (w, h, c) = (src.width(), src.height(), src.channels());
    if flow.width() != w || flow.height() != h {
        return Err(Error::DimMismatch(format!(
            "flow {}x{} vs image {w}x{h}",
            flow.width(),
            flow.height()
        )));
    }
    let fill = opts.fill_for(c);
    let mut data = vec![0.0f32; w * h * c];
    let mut coverage = vec![false; w * h];
    let counts: (usize, usize) = data
        .par_chunks_mut(w * c)
        .zip(coverage.par_chunks_mut(w))
        .enumerate()
        .map(|(y, (row, cov))| {
            let (mut diverged, mut outside) = (0, 0);
            for x in 0..w {
                let out = &mut row[x * c..(x + 1) * c];
                match backward_map(flow, x as f64, y as f64, opts) {
                    BackwardMap::Diverged => {
                        diverged += 1;
                        out.copy_from_slice(&fill);
                    }
                    BackwardMap::Mapped { x: px, y: py, .. } => {
                        let inside = px >= -0.5 && py >= -0.5 && px <= w as f64 - 0.5 && py <= h as f64 - 0.5;
                        let nx = (px.round().max(0.0) as usize).min(w - 1);
                        let ny = (py.round().max(0.0) as usize).min(h - 1);
                        if inside && flow.is_valid(nx, ny) {
                            src.sample_bilinear(px, py, out);
                            cov[x] = true;
                        } else {
                            outside += 1;
                            out.copy_from_slice(&fill);
                        }
                    }
                }
            }
            (diverged, outside)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(Rectified {
        image: RasterImage::from_data(w, h, c, data)?,
        coverage,
        diverged: counts.0,
        out_of_bounds: counts.1,
    })
}

/// Output pixels whose backward-mapped source lands on a pixel selected by
/// `source_mask`, e.g. the page region of a synthetic sample.
pub fn coverage_of<T: Scalar>(flow: &FlowField<T>, source_mask: &[bool], opts: &ResampleOptions) -> Result<Vec<bool>> {
    let (w, h) = (flow.width(), flow.height());
    if source_mask.len() != w * h {
        return Err(Error::DimMismatch(format!("mask of {} entries for a {w}x{h} flow", source_mask.len())));
    }
    let mut out = vec![false; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            if let Some((px, py)) = backward_map(flow, x as f64, y as f64, opts).point() {
                if px >= -0.5 && py >= -0.5 && px <= w as f64 - 0.5 && py <= h as f64 - 0.5 {
                    let nx = (px.round().max(0.0) as usize).min(w - 1);
                    let ny = (py.round().max(0.0) as usize).min(h - 1);
                    *o = source_mask[ny * w + nx];
                }
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, 3, |x, y, ch| {
            (((x * 7 + y * 13 + ch * 5) % 17) as f32 / 16.0) * 0.8 + 0.1
        })
        .unwrap()
    }

    fn sine_flow(w: usize, h: usize) -> FlowField<f64> {
        FlowField::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (3.0 * (y / 10.0 + x / 15.0).sin(), 2.0 * (x / 8.0).cos())
        })
        .unwrap()
    }

    #[test]
    fn zero_flow_maps_in_one_iteration() {
        let f = FlowField::<f64>::zeros(8, 8).unwrap();
        let r = backward_map(&f, 3.0, 5.0, &ResampleOptions::default());
        assert_eq!(r, BackwardMap::Mapped { x: 3.0, y: 5.0, iterations: 1 });
    }

    #[test]
    fn constant_flow_maps_in_two_iterations() {
        let f = FlowField::<f64>::from_fn(16, 16, |_, _| (2.5, -1.0)).unwrap();
        let r = backward_map(&f, 7.0, 4.0, &ResampleOptions::default());
        assert_eq!(r, BackwardMap::Mapped { x: 4.5, y: 5.0, iterations: 2 });
    }

    #[test]
    fn sine_field_against_dense_forward_search() {
        let flow = sine_flow(64, 64);
        let opts = ResampleOptions::default();
        // forward-map a dense lattice and keep the sample landing nearest q
        let step = 0.05;
        let n = (63.0 / step) as usize + 1;
        let mut forward = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let (px, py) = (i as f64 * step, j as f64 * step);
                let (u, v) = flow.sample_bilinear(px, py);
                forward.push((px, py, px + u, py + v));
            }
        }
        for &(qx, qy) in &[(20.0, 20.0), (31.0, 40.0), (45.0, 12.0), (12.0, 50.0), (32.0, 32.0)] {
            let (px, py) = backward_map(&flow, qx, qy, &opts).point().expect("converges");
            let (u, v) = flow.sample_bilinear(px, py);
            assert!(((px + u - qx).powi(2) + (py + v - qy).powi(2)).sqrt() <= 2.0 * opts.tolerance);
            let best = forward
                .iter()
                .min_by(|a, b| {
                    let da = (a.2 - qx).powi(2) + (a.3 - qy).powi(2);
                    let db = (b.2 - qx).powi(2) + (b.3 - qy).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!((best.0 - px).abs() < 0.25 && (best.1 - py).abs() < 0.25, "{best:?} vs {px},{py}");
        }
    }

    #[test]
    fn contraction_converges_everywhere() {
        let flow = sine_flow(64, 64);
        let opts = ResampleOptions::default();
        for y in 0..64 {
            for x in 0..64 {
                assert!(backward_map(&flow, x as f64, y as f64, &opts).point().is_some());
            }
        }
    }

    #[test]
    fn expanding_flow_diverges() {
        let flow = FlowField::<f64>::from_fn(32, 32, |x, _| (2.0 * (x as f64 - 16.0), 0.0)).unwrap();
        assert_eq!(backward_map(&flow, 10.0, 10.0, &ResampleOptions::default()), BackwardMap::Diverged);
    }

    #[test]
    fn zero_flow_is_bit_exact_identity() {
        let src = pattern(23, 17);
        let out = rectify_image(&src, &FlowField::<f32>::zeros(23, 17).unwrap(), &ResampleOptions::default()).unwrap();
        assert_eq!(out.data(), src.data());
    }

    #[test]
    fn constant_shift_matches_array_shift() {
        let src = pattern(40, 12);
        let flow = FlowField::<f64>::from_fn(40, 12, |_, _| (10.0, 0.0)).unwrap();
        let r = rectify_with_coverage(&src, &flow, &ResampleOptions::default()).unwrap();
        for y in 0..12 {
            for x in 0..40 {
                if x < 10 {
                    assert_eq!(r.image.pixel(x, y), &[1.0, 1.0, 1.0]);
                    assert!(!r.coverage[y * 40 + x]);
                } else {
                    assert_eq!(r.image.pixel(x, y), src.pixel(x - 10, y));
                }
            }
        }
        assert_eq!(r.out_of_bounds, 120);
    }

    #[test]
    fn translation_equivariance() {
        let (tx, ty) = (5usize, 3usize);
        let src = pattern(48, 40);
        let flow = sine_flow(48, 40);
        let shifted_src = RasterImage::from_fn(48, 40, 3, |x, y, c| {
            src.get(x.saturating_sub(tx), y.saturating_sub(ty), c)
        })
        .unwrap();
        let shifted_flow = FlowField::from_fn(48, 40, |x, y| flow.get(x.saturating_sub(tx), y.saturating_sub(ty))).unwrap();
        let opts = ResampleOptions { tolerance: 1e-6, max_iterations: 200, ..Default::default() };
        let a = rectify_image(&src, &flow, &opts).unwrap();
        let b = rectify_image(&shifted_src, &shifted_flow, &opts).unwrap();
        for y in 12..30 {
            for x in 12..36 {
                for c in 0..3 {
                    assert!((a.get(x, y, c) - b.get(x + tx, y + ty, c)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn masked_source_is_filled() {
        let src = pattern(16, 16);
        let mut flow = FlowField::<f32>::zeros(16, 16).unwrap();
        flow.set(4, 4, None);
        let r = rectify_with_coverage(&src, &flow, &ResampleOptions { fill: [0.0; 3], ..Default::default() }).unwrap();
        assert_eq!(r.image.pixel(4, 4), &[0.0, 0.0, 0.0]);
        assert!(!r.coverage[4 * 16 + 4]);
    }

    #[test]
    fn dimension_mismatch() {
        let src = pattern(8, 8);
        let flow = FlowField::<f32>::zeros(8, 9).unwrap();
        assert!(matches!(rectify_image(&src, &flow, &ResampleOptions::default()), Err(Error::DimMismatch(_))));
    }
}
