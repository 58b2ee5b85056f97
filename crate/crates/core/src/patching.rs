//! Overlapping patch grid, patch extraction and per-patch flow re-referencing.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, RasterImage};
use crate::scalar::Scalar;

/// Side length the global context patch is resampled to.
pub const DEFAULT_GLOBAL_RESOLUTION: usize = 256;

/// A square local patch and its concentric, border-clamped context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    pub global_origin_x: usize,
    pub global_origin_y: usize,
    pub global_width: usize,
    pub global_height: usize,
}

impl PatchSpec {
    /// Patch center in image coordinates (`floor(size / 2)` convention).
    #[inline]
    pub fn center(&self) -> (usize, usize) {
        (self.origin_x + self.size / 2, self.origin_y + self.size / 2)
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.origin_x && x < self.origin_x + self.size && y >= self.origin_y && y < self.origin_y + self.size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub stride: usize,
    col_origins: Vec<usize>,
    row_origins: Vec<usize>,
    patches: Vec<PatchSpec>,
}

/// Patch stride for a 25% overlap in each dimension.
pub fn stride_for(patch_size: usize) -> usize {
    ((0.75 * patch_size as f64).round() as usize).max(1)
}

/// Origins along one axis: regular steps of `stride`, with the last patch
/// snapped so it ends on the border. If snapping would make three patches
/// overlap, the regular patch before the snapped one is dropped.
fn axis_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut origins = vec![0];
    let last = len - size;
    while *origins.last().unwrap() < last {
        let next = origins.last().unwrap() + stride;
        if next >= last {
            if origins.len() >= 2 && last < origins[origins.len() - 2] + size {
                origins.pop();
            }
            origins.push(last);
            break;
        }
        origins.push(next);
    }
    origins
}

fn global_window(origin: usize, size: usize, len: usize) -> (usize, usize) {
    let lo = origin.saturating_sub(size / 2);
    let hi = (origin + size + size / 2).min(len);
    (lo, hi - lo)
}

pub fn build_grid(width: usize, height: usize, patch_size: usize) -> Result<PatchGrid> {
    if patch_size < 8 {
        return Err(Error::Size(format!("patch size {patch_size} is below the minimum of 8")));
    }
    if patch_size > width.min(height) {
        return Err(Error::Size(format!(
            "patch size {patch_size} exceeds image dimensions {width}x{height}"
        )));
    }
    let stride = stride_for(patch_size);
    let col_origins = axis_origins(width, patch_size, stride);
    let row_origins = axis_origins(height, patch_size, stride);
    Ok(assemble(width, height, patch_size, stride, col_origins, row_origins))
}

fn assemble(
    width: usize,
    height: usize,
    patch_size: usize,
    stride: usize,
    col_origins: Vec<usize>,
    row_origins: Vec<usize>,
) -> PatchGrid {
    let mut patches = Vec::with_capacity(col_origins.len() * row_origins.len());
    for (row, &oy) in row_origins.iter().enumerate() {
        for (col, &ox) in col_origins.iter().enumerate() {
            let (gx, gw) = global_window(ox, patch_size, width);
            let (gy, gh) = global_window(oy, patch_size, height);
            patches.push(PatchSpec {
                row,
                col,
                origin_x: ox,
                origin_y: oy,
                size: patch_size,
                global_origin_x: gx,
                global_origin_y: gy,
                global_width: gw,
                global_height: gh,
            });
        }
    }
    PatchGrid { image_width: width, image_height: height, patch_size, stride, col_origins, row_origins, patches }
}

impl PatchGrid {
    #[inline]
    pub fn patches(&self) -> &[PatchSpec] {
        &self.patches
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.col_origins.len()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.row_origins.len()
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.col_origins
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.row_origins
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    fn axis_cover(origins: &[usize], size: usize, pos: usize) -> SmallVec<[usize; 2]> {
        // origins are sorted; at most two can contain `pos`
        let end = origins.partition_point(|&o| o <= pos);
        let mut out = SmallVec::new();
        for k in end.saturating_sub(3)..end {
            if pos < origins[k] + size {
                out.push(k);
            }
        }
        out
    }

    /// Indices of the patches containing `(x, y)`, in row-major grid order.
    pub fn covering(&self, x: usize, y: usize) -> SmallVec<[usize; 4]> {
        let cols = Self::axis_cover(&self.col_origins, self.patch_size, x);
        let rows = Self::axis_cover(&self.row_origins, self.patch_size, y);
        let mut out = SmallVec::new();
        for &r in &rows {
            for &c in &cols {
                out.push(self.index(r, c));
            }
        }
        out
    }

    /// Patch whose center is nearest the image center; ties go to the
    /// earliest patch in row-major order.
    pub fn center_most(&self) -> usize {
        self.nearest_to(self.image_width as f64 / 2.0, self.image_height as f64 / 2.0, |_| true)
            .expect("grid is non-empty")
    }

    /// Nearest patch center to a point among patches accepted by `filter`.
    pub fn nearest_to(&self, x: f64, y: f64, filter: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.patches.iter().enumerate() {
            if !filter(i) {
                continue;
            }
            let (cx, cy) = p.center();
            let d = (cx as f64 - x).powi(2) + (cy as f64 - y).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// The same layout on a grid shrunk by `factor`. Image size, patch size
    /// and every origin must be divisible by the factor.
    pub fn downsample(&self, factor: usize) -> Result<PatchGrid> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let divisible = |v: &usize| v % factor == 0;
        if !(divisible(&self.image_width)
            && divisible(&self.image_height)
            && divisible(&self.patch_size)
            && self.col_origins.iter().all(divisible)
            && self.row_origins.iter().all(divisible))
        {
            return Err(Error::Size(format!(
                "grid {}x{} with patch {} is not divisible by {factor}",
                self.image_width, self.image_height, self.patch_size
            )));
        }
        let size = self.patch_size / factor;
        if size < 2 {
            return Err(Error::Size(format!("patch size {} too small for factor {factor}", self.patch_size)));
        }
        Ok(assemble(
            self.image_width / factor,
            self.image_height / factor,
            size,
            (self.stride / factor).max(1),
            self.col_origins.iter().map(|o| o / factor).collect(),
            self.row_origins.iter().map(|o| o / factor).collect(),
        ))
    }
}

/// Local crop and the context window resampled to `global_resolution`.
pub fn extract_patch(
    img: &RasterImage,
    spec: &PatchSpec,
    global_resolution: usize,
) -> Result<(RasterImage, RasterImage)> {
    let local = img.crop(spec.origin_x, spec.origin_y, spec.size, spec.size)?;
    let global = img.resample_region(
        spec.global_origin_x as f64,
        spec.global_origin_y as f64,
        spec.global_width as f64,
        spec.global_height as f64,
        global_resolution,
        global_resolution,
    )?;
    Ok((local, global))
}

/// Subtracts the flow at the patch center so the center stays fixed.
pub fn rereference_flow<T: Scalar>(flow: &FlowField<T>) -> Result<FlowField<T>> {
    let (cx, cy) = (flow.width() / 2, flow.height() / 2);
    if !flow.is_valid(cx, cy) {
        return Err(Error::CenterInvalid { x: cx, y: cy });
    }
    Ok(rereference_at(flow, cx, cy))
}

/// Subtracts the flow value at `(x, y)` from every masked-in pixel.
pub fn rereference_at<T: Scalar>(flow: &FlowField<T>, x: usize, y: usize) -> FlowField<T> {
    let (u0, v0) = flow.get(x, y);
    let mut out = flow.offset(-u0, -v0);
    if flow.is_valid(x, y) {
        // exact zero, independent of rounding in the subtraction above
        out.set(x, y, Some((T::zero(), T::zero())));
    }
    out
}

/// Masked-in pixel nearest to `(x, y)`, scanning outward ring by ring.
pub fn nearest_valid<T: Scalar>(flow: &FlowField<T>, x: usize, y: usize) -> Option<(usize, usize)> {
    let (w, h) = (flow.width() as isize, flow.height() as isize);
    let (x, y) = (x as isize, y as isize);
    let max_r = w.max(h);
    for r in 0..=max_r {
        let mut best: Option<(isize, usize, usize)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs() != r && dy.abs() != r {
                    continue;
                }
                let (px, py) = (x + dx, y + dy);
                if px < 0 || py < 0 || px >= w || py >= h {
                    continue;
                }
                if flow.is_valid(px as usize, py as usize) {
                    let d = dx * dx + dy * dy;
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, px as usize, py as usize));
                    }
                }
            }
        }
        if let Some((_, px, py)) = best {
            return Some((px, py));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_resolution_grid() {
        let grid = build_grid(1200, 1600, 96).unwrap();
        assert_eq!(grid.stride, 72);
        let cols = grid.col_origins();
        assert_eq!(&cols[..4], &[0, 72, 144, 216]);
        assert_eq!(*cols.last().unwrap(), 1104);
        assert_eq!(cols[cols.len() - 2], 1080);
        assert_eq!(*grid.row_origins().last().unwrap(), 1504);
        assert_eq!(grid.len(), grid.rows() * grid.cols());
    }

    #[test]
    fn single_patch_image() {
        let grid = build_grid(96, 96, 96).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!((grid.patches()[0].origin_x, grid.patches()[0].origin_y), (0, 0));
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(matches!(build_grid(100, 100, 128), Err(Error::Size(_))));
        assert!(matches!(build_grid(100, 100, 4), Err(Error::Size(_))));
    }

    #[test]
    fn snapped_patch_never_triples_coverage() {
        // 96 + 72 + 1: the snapped origin (73) would overlap the first patch
        let origins = axis_origins(169, 96, 72);
        assert_eq!(origins, vec![0, 73]);
        let origins = axis_origins(96 + 72 + 30, 96, 72);
        assert_eq!(origins, vec![0, 72, 102]);
    }

    #[test]
    fn global_window_is_concentric_when_interior() {
        let grid = build_grid(600, 600, 96).unwrap();
        let p = grid.patches().iter().find(|p| p.origin_x == 144 && p.origin_y == 216).unwrap();
        assert_eq!((p.global_origin_x, p.global_origin_y), (144 - 48, 216 - 48));
        assert_eq!((p.global_width, p.global_height), (192, 192));
        let corner = &grid.patches()[0];
        assert_eq!((corner.global_origin_x, corner.global_width), (0, 144));
    }

    #[test]
    fn extract_local_is_exact_crop() {
        let img = RasterImage::from_fn(200, 150, 1, |x, y, _| (x + y) as f32 / 400.0).unwrap();
        let grid = build_grid(200, 150, 96).unwrap();
        let (local, global) = extract_patch(&img, &grid.patches()[0], 64).unwrap();
        assert_eq!(local, img.crop(0, 0, 96, 96).unwrap());
        assert_eq!((global.width(), global.height()), (64, 64));
    }

    #[test]
    fn corner_global_patch_clamped_then_resampled() {
        let img = RasterImage::from_fn(200, 200, 1, |x, _, _| x as f32 / 200.0).unwrap();
        let grid = build_grid(200, 200, 96).unwrap();
        let spec = grid.patches()[0];
        let (_, global) = extract_patch(&img, &spec, DEFAULT_GLOBAL_RESOLUTION).unwrap();
        assert_eq!(global.width(), DEFAULT_GLOBAL_RESOLUTION);
        // the 144-wide window starting at 0 spans x in [0, 144)
        let last = global.get(DEFAULT_GLOBAL_RESOLUTION - 1, 0, 0);
        assert!(last < 144.0 / 200.0 && last > 140.0 / 200.0);
    }

    #[test]
    fn rereference_constant_gives_zero() {
        let f = FlowField::<f32>::from_fn(9, 9, |_, _| (5.0, -3.0)).unwrap();
        let r = rereference_flow(&f).unwrap();
        assert!(r.u().iter().chain(r.v()).all(|&v| v == 0.0));
    }

    #[test]
    fn rereference_linear() {
        let f = FlowField::<f64>::from_fn(5, 5, |x, _| (x as f64, 0.0)).unwrap();
        let r = rereference_flow(&f).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(r.get(x, y).0, x as f64 - 2.0);
            }
        }
        assert_eq!(rereference_flow(&r).unwrap(), r);
    }

    #[test]
    fn rereference_requires_valid_center() {
        let mut f = FlowField::<f32>::zeros(6, 6).unwrap();
        f.set(3, 3, None);
        assert!(matches!(rereference_flow(&f), Err(Error::CenterInvalid { x: 3, y: 3 })));
        assert!(nearest_valid(&f, 3, 3).is_some());
    }

    #[test]
    fn downsampled_grid_matches_layout() {
        let grid = build_grid(1200, 1600, 96).unwrap();
        let coarse = grid.downsample(4).unwrap();
        assert_eq!((coarse.image_width, coarse.image_height, coarse.patch_size), (300, 400, 24));
        assert_eq!(coarse.len(), grid.len());
        assert_eq!(*coarse.col_origins().last().unwrap(), 276);
        assert!(build_grid(1201, 1600, 96).unwrap().downsample(4).is_err());
    }
}
