//! Gradient-domain stitching of overlapping patch flows.
//!
//! Per pixel, one covering patch is chosen to supply the flow gradient. The
//! choice minimizes, over 4-neighbors `p, q` labeled with patches `a, b`,
//! `|G_a(p) - G_b(p)|^2 + |G_a(q) - G_b(q)|^2`, subject to `a` covering `p`.

mod expansion;
pub mod maxflow;

use smallvec::SmallVec;

pub use expansion::{alpha_expansion, energy, ExpansionResult, LabelingModel, INFEASIBLE_COST, MAX_CYCLES};

use crate::error::{Error, Result};
use crate::flowest::PatchFlowEstimate;
use crate::imagecore::{gradient, GradientField, RasterImage};
use crate::patching::PatchGrid;
use crate::scalar::Scalar;

/// Full-image gradient assembled from the selected patches.
pub type StitchedGradient<T> = GradientField<T>;

/// Per-pixel patch choice.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    pub width: usize,
    pub height: usize,
    /// Position of the chosen patch among the pixel's candidates (0..4).
    pub label: Vec<u8>,
    /// Index of the chosen patch in the grid.
    pub patch_id: Vec<u32>,
    pub initial_energy: f64,
    pub energy: f64,
}

pub fn patch_gradients<T: Scalar>(estimates: &[PatchFlowEstimate<T>]) -> Result<Vec<GradientField<T>>> {
    estimates.iter().map(|e| gradient(&e.flow)).collect()
}

/// Seam model over a patch grid: candidates exclude a patch's last column
/// (row), whose forward difference is not observed, unless it is also the
/// image border.
pub struct PatchSeamModel<'a, T> {
    grid: &'a PatchGrid,
    grads: &'a [GradientField<T>],
    candidates: Vec<SmallVec<[u32; 4]>>,
}

impl<'a, T: Scalar> PatchSeamModel<'a, T> {
    pub fn new(grid: &'a PatchGrid, grads: &'a [GradientField<T>]) -> Result<Self> {
        if grads.len() != grid.len() {
            return Err(Error::CountMismatch { expected: grid.len(), actual: grads.len() });
        }
        for g in grads {
            if g.width != grid.patch_size || g.height != grid.patch_size {
                return Err(Error::DimMismatch(format!(
                    "patch gradient {}x{} vs patch size {}",
                    g.width, g.height, grid.patch_size
                )));
            }
        }
        let (w, h) = (grid.image_width, grid.image_height);
        let mut candidates = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let cover = grid.covering(x, y);
                let usable: SmallVec<[u32; 4]> = cover
                    .iter()
                    .filter(|&&i| {
                        let p = &grid.patches()[i];
                        let last = p.size - 1;
                        (x - p.origin_x < last || x + 1 == w) && (y - p.origin_y < last || y + 1 == h)
                    })
                    .map(|&i| i as u32)
                    .collect();
                if usable.is_empty() {
                    return Err(Error::Infeasible(format!("pixel ({x}, {y}) has no usable patch")));
                }
                candidates.push(usable);
            }
        }
        Ok(Self { grid, grads, candidates })
    }

    #[inline]
    fn gradient_at(&self, patch: u32, pixel: usize) -> Option<[f64; 4]> {
        let spec = &self.grid.patches()[patch as usize];
        let (x, y) = (pixel % self.grid.image_width, pixel / self.grid.image_width);
        if !spec.contains(x, y) {
            return None;
        }
        let g = self.grads[patch as usize].at(x - spec.origin_x, y - spec.origin_y);
        Some([g[0].f64(), g[1].f64(), g[2].f64(), g[3].f64()])
    }

    /// Nearest-patch-center labeling, ties to the earlier candidate.
    pub fn nearest_center_labels(&self) -> Vec<u8> {
        let w = self.grid.image_width;
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, cand)| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let mut best = (f64::INFINITY, 0u8);
                for (k, &c) in cand.iter().enumerate() {
                    let (cx, cy) = self.grid.patches()[c as usize].center();
                    let d = (cx as f64 - x).powi(2) + (cy as f64 - y).powi(2);
                    if d < best.0 {
                        best = (d, k as u8);
                    }
                }
                best.1
            })
            .collect()
    }
}

impl<T: Scalar> LabelingModel for PatchSeamModel<'_, T> {
    fn width(&self) -> usize {
        self.grid.image_width
    }

    fn height(&self) -> usize {
        self.grid.image_height
    }

    fn candidates(&self, i: usize) -> &[u32] {
        &self.candidates[i]
    }

    fn pair_cost(&self, p: usize, q: usize, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        let terms = (
            self.gradient_at(a, p),
            self.gradient_at(b, p),
            self.gradient_at(a, q),
            self.gradient_at(b, q),
        );
        match terms {
            (Some(ap), Some(bp), Some(aq), Some(bq)) => squared_distance(&ap, &bp) + squared_distance(&aq, &bq),
            _ => INFEASIBLE_COST,
        }
    }
}

#[inline]
pub fn squared_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Chooses a patch per pixel by alpha-expansion from the nearest-center labeling.
pub fn optimize_indices<T: Scalar>(grid: &PatchGrid, grads: &[GradientField<T>]) -> Result<IndexMap> {
    let model = PatchSeamModel::new(grid, grads)?;
    let init = model.nearest_center_labels();
    let result = alpha_expansion(&model, init);
    let patch_id = result
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| model.candidates(i)[l as usize])
        .collect();
    Ok(IndexMap {
        width: grid.image_width,
        height: grid.image_height,
        label: result.labels,
        patch_id,
        initial_energy: result.initial_energy,
        energy: result.energy,
    })
}

/// Reads every pixel's gradient from its chosen patch.
pub fn assemble_gradient<T: Scalar>(
    grid: &PatchGrid,
    grads: &[GradientField<T>],
    idx: &IndexMap,
) -> Result<StitchedGradient<T>> {
    let (w, h) = (grid.image_width, grid.image_height);
    if idx.width != w || idx.height != h {
        return Err(Error::DimMismatch(format!("index map {}x{} vs grid {w}x{h}", idx.width, idx.height)));
    }
    if grads.len() != grid.len() {
        return Err(Error::CountMismatch { expected: grid.len(), actual: grads.len() });
    }
    let mut out = GradientField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let pid = idx.patch_id[i] as usize;
            let spec = &grid.patches()[pid];
            if !spec.contains(x, y) {
                return Err(Error::Infeasible(format!("pixel ({x}, {y}) labeled with non-covering patch {pid}")));
            }
            let g = &grads[pid];
            let j = g.index(x - spec.origin_x, y - spec.origin_y);
            out.gx_u[i] = g.gx_u[j];
            out.gy_u[i] = g.gy_u[j];
            out.gx_v[i] = g.gx_v[j];
            out.gy_v[i] = g.gy_v[j];
            out.valid_x[i] = g.valid_x[j];
            out.valid_y[i] = g.valid_y[j];
        }
    }
    Ok(out)
}

const LABEL_COLORS: [[f32; 3]; 4] = [[0.90, 0.30, 0.25], [0.25, 0.65, 0.30], [0.25, 0.45, 0.90], [0.95, 0.80, 0.20]];

/// Visualizes the reduced labels with four fixed colors.
pub fn index_map_image(idx: &IndexMap) -> RasterImage {
    let data = idx.label.iter().flat_map(|&l| LABEL_COLORS[l as usize % 4]).collect();
    RasterImage::from_data(idx.width, idx.height, 3, data).expect("index map dimensions are non-zero")
}

/// Grey previews of `(Ux, Uy, Vx, Vy)`: mid-grey is zero, the scale is
/// shared and set by the largest valid magnitude; invalid entries are black.
pub fn gradient_previews<T: Scalar>(g: &GradientField<T>) -> [RasterImage; 4] {
    let comps = [(&g.gx_u, &g.valid_x), (&g.gy_u, &g.valid_y), (&g.gx_v, &g.valid_x), (&g.gy_v, &g.valid_y)];
    let peak = comps
        .iter()
        .flat_map(|(c, m)| c.iter().zip(m.iter()).filter(|(_, &m)| m).map(|(v, _)| v.f64().abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    comps.map(|(c, m)| {
        let data = c
            .iter()
            .zip(m)
            .map(|(v, &ok)| if ok { (0.5 + 0.5 * v.f64() / peak) as f32 } else { 0.0 })
            .collect();
        RasterImage::from_data(g.width, g.height, 1, data).expect("gradient dimensions are non-zero")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::FlowField;
    use crate::patching::build_grid;

    fn estimates_from(grid: &PatchGrid, flow: &FlowField<f64>) -> Vec<PatchFlowEstimate<f64>> {
        grid.patches()
            .iter()
            .map(|s| PatchFlowEstimate { spec: *s, flow: flow.crop(s.origin_x, s.origin_y, s.size, s.size).unwrap() })
            .collect()
    }

    #[test]
    fn single_patch_grid_has_zero_energy() {
        let grid = build_grid(16, 16, 16).unwrap();
        let flow = FlowField::<f64>::from_fn(16, 16, |x, y| ((x * y) as f64 * 0.1, 0.0)).unwrap();
        let grads = patch_gradients(&estimates_from(&grid, &flow)).unwrap();
        let idx = optimize_indices(&grid, &grads).unwrap();
        assert!(idx.patch_id.iter().all(|&p| p == 0));
        assert_eq!(idx.energy, 0.0);
    }

    #[test]
    fn constant_and_linear_patches() {
        let grid = build_grid(40, 40, 16).unwrap();
        let flow = FlowField::<f64>::from_fn(40, 40, |x, _| (2.0 * x as f64, 7.0)).unwrap();
        let grads = patch_gradients(&estimates_from(&grid, &flow)).unwrap();
        for g in &grads {
            for y in 0..16 {
                for x in 0..15 {
                    assert_eq!(g.at(x, y), [2.0, 0.0, 0.0, 0.0]);
                }
            }
        }
        let idx = optimize_indices(&grid, &grads).unwrap();
        assert_eq!(idx.energy, 0.0);
    }

    #[test]
    fn assembly_reproduces_global_gradient() {
        let (w, h) = (70, 50);
        let grid = build_grid(w, h, 24).unwrap();
        let flow = FlowField::<f64>::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (0.01 * x * x + (y * 0.2).sin(), 0.3 * x - 0.02 * y * y)
        })
        .unwrap();
        // per-patch constant offsets must not matter
        let mut est = estimates_from(&grid, &flow);
        for (i, e) in est.iter_mut().enumerate() {
            e.flow = e.flow.offset(i as f64 * 3.7, -(i as f64));
        }
        let grads = patch_gradients(&est).unwrap();
        let idx = optimize_indices(&grid, &grads).unwrap();
        let stitched = assemble_gradient(&grid, &grads, &idx).unwrap();
        let direct = gradient(&flow).unwrap();
        for i in 0..w * h {
            assert!((stitched.gx_u[i] - direct.gx_u[i]).abs() < 1e-9);
            assert!((stitched.gy_v[i] - direct.gy_v[i]).abs() < 1e-9);
            assert_eq!(stitched.valid_x[i], direct.valid_x[i]);
        }
    }

    #[test]
    fn offsets_do_not_change_labels() {
        let grid = build_grid(60, 60, 24).unwrap();
        let flow =
            FlowField::<f64>::from_fn(60, 60, |x, y| ((x as f64 * 0.3).sin(), (y as f64 * 0.2).cos())).unwrap();
        let mut est = estimates_from(&grid, &flow);
        // disagreeing patches so the seam actually matters
        for (i, e) in est.iter_mut().enumerate() {
            let bump = i as f64 * 0.01;
            e.flow = FlowField::from_fn(24, 24, |x, y| {
                let (u, v) = e.flow.get(x, y);
                (u + bump * (x * x) as f64, v)
            })
            .unwrap();
        }
        let a = optimize_indices(&grid, &patch_gradients(&est).unwrap()).unwrap();
        for (i, e) in est.iter_mut().enumerate() {
            e.flow = e.flow.offset(10.0 * i as f64, -5.0);
        }
        let b = optimize_indices(&grid, &patch_gradients(&est).unwrap()).unwrap();
        assert_eq!(a.patch_id, b.patch_id);
        assert!(a.energy <= a.initial_energy);
    }

    #[test]
    fn checkerboard_assembly_is_piecewise() {
        let grid = build_grid(24, 16, 16).unwrap();
        assert_eq!(grid.len(), 2);
        let grads: Vec<GradientField<f64>> = (0..2)
            .map(|k| {
                let mut g = GradientField::zeros(16, 16);
                g.gx_u.iter_mut().for_each(|v| *v = k as f64 + 1.0);
                g
            })
            .collect();
        let model = PatchSeamModel::new(&grid, &grads).unwrap();
        let mut patch_id = Vec::new();
        let mut label = Vec::new();
        for y in 0..16 {
            for x in 0..24 {
                let cand = model.candidates(y * 24 + x);
                let k = if cand.len() == 2 { (x + y) % 2 } else { 0 };
                label.push(k as u8);
                patch_id.push(cand[k]);
            }
        }
        let idx = IndexMap { width: 24, height: 16, label, patch_id: patch_id.clone(), initial_energy: 0.0, energy: 0.0 };
        let out = assemble_gradient(&grid, &grads, &idx).unwrap();
        for i in 0..24 * 16 {
            assert_eq!(out.gx_u[i], patch_id[i] as f64 + 1.0);
        }
    }
}
