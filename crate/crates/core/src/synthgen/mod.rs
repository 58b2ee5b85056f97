//! Synthetic distorted documents with analytic ground-truth flows.
//!
//! Each distortion is a forward warp `W` from the flat page to the distorted
//! image. The ground-truth flow on the distorted image is `W^-1(p) - p`, so
//! that `p + F(p)` lands on the flat page.

mod dataset;
mod pages;
mod shading;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, RasterImage};
use crate::resample::{invert_with, BackwardMap, ResampleOptions};
use crate::scalar::Scalar;

pub use dataset::{
    dataset_specs, generate_dataset, list_samples, load_manifest, sample_path, write_sample, DatasetOptions,
    SampleManifest,
};
pub use pages::{test_page, TEST_PAGE_COUNT};
pub use shading::{apply_shading, generate_shaded, shading_field};

/// Smallest accepted flat page side.
pub const MIN_SIDE: usize = 256;
/// Color of distorted pixels that show no page.
pub const DESK: [f32; 3] = [0.3, 0.3, 0.3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    Perspective,
    Curved,
    Folded,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [Self::Perspective, Self::Curved, Self::Folded];

    pub fn name(self) -> &'static str {
        match self {
            Self::Perspective => "perspective",
            Self::Curved => "curved",
            Self::Folded => "folded",
        }
    }
}

impl std::fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion kind `{s}` (perspective, curved, folded)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub seed: u64,
    /// In `[0, 1]`.
    pub magnitude: f64,
    /// Fold lines, 1 to 4; only read for folded pages.
    #[serde(default = "one")]
    pub creases: usize,
}

fn one() -> usize {
    1
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, seed: u64, magnitude: f64) -> Self {
        Self { kind, seed, magnitude, creases: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Config(format!("magnitude must lie in [0, 1], got {}", self.magnitude)));
        }
        if !(1..=4).contains(&self.creases) {
            return Err(Error::Config(format!("creases must lie in 1..=4, got {}", self.creases)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample<T> {
    pub flat: RasterImage,
    pub distorted: RasterImage,
    /// Distorted to flat, masked where the distorted pixel shows no page.
    pub gt_flow: FlowField<T>,
    pub spec: DistortionSpec,
}

#[derive(Clone, Debug)]
struct Crease {
    origin: (f64, f64),
    normal: (f64, f64),
    push: (f64, f64),
    /// Tent value at the image center, subtracted to keep the center fixed.
    bias: f64,
}

#[derive(Clone, Debug)]
enum Warp {
    Identity,
    /// Distorted-to-flat homography, row-major.
    Homography([f64; 9]),
    /// `(amplitude, angular frequency per pixel, phase)` of `y += sum a sin(w x + phase)`.
    Curved(Vec<(f64, f64, f64)>),
    Folded(Vec<Crease>),
}

impl Warp {
    fn build(spec: &DistortionSpec, w: usize, h: usize) -> Self {
        if spec.magnitude == 0.0 {
            return Warp::Identity;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (wf, hf) = (w as f64, h as f64);
        match spec.kind {
            DistortionKind::Perspective => {
                let corners = [(0.0, 0.0), (wf - 1.0, 0.0), (wf - 1.0, hf - 1.0), (0.0, hf - 1.0)];
                let reach = spec.magnitude * 0.15 * wf;
                let moved: Vec<(f64, f64)> = corners
                    .iter()
                    .map(|&(x, y)| {
                        let r = reach * rng.random::<f64>().sqrt();
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        (x + r * a.cos(), y + r * a.sin())
                    })
                    .collect();
                // flat -> distorted through the displaced corners, stored inverted
                let forward = homography_from_points(&corners, &moved);
                Warp::Homography(invert3(&forward))
            }
            DistortionKind::Curved => {
                let n = rng.random_range(2..=4);
                let mut terms: Vec<(f64, f64, f64)> = (0..n)
                    .map(|_| {
                        let cycles = rng.random_range(0.5..2.0);
                        let amp = rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        (amp, std::f64::consts::TAU * cycles / wf, rng.random_range(0.0..std::f64::consts::TAU))
                    })
                    .collect();
                let slope: f64 = terms.iter().map(|(a, f, _)| a.abs() * f).sum();
                let scale = 0.5 * spec.magnitude / slope;
                terms.iter_mut().for_each(|t| t.0 *= scale);
                Warp::Curved(terms)
            }
            DistortionKind::Folded => {
                let weights: Vec<f64> = (0..spec.creases).map(|_| rng.random_range(0.5..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let center = (wf / 2.0, hf / 2.0);
                let creases = weights
                    .iter()
                    .map(|wk| {
                        let theta = rng.random_range(0.0..std::f64::consts::PI);
                        let normal = (theta.cos(), theta.sin());
                        let origin = (
                            center.0 + rng.random_range(-0.3..0.3) * wf,
                            center.1 + rng.random_range(-0.3..0.3) * hf,
                        );
                        let turn = theta + rng.random_range(-1.0..1.0);
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let amp = sign * 0.3 * spec.magnitude * wk / total;
                        let push = (amp * turn.cos(), amp * turn.sin());
                        let bias = (normal.0 * (center.0 - origin.0) + normal.1 * (center.1 - origin.1)).abs();
                        Crease { origin, normal, push, bias }
                    })
                    .collect();
                Warp::Folded(creases)
            }
        }
    }

    /// Forward displacement `W(x) - x` of the iteratively inverted warps.
    fn forward_displacement(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Warp::Curved(terms) => (0.0, terms.iter().map(|(a, f, p)| a * (f * x + p).sin()).sum()),
            Warp::Folded(creases) => creases.iter().fold((0.0, 0.0), |acc, c| {
                let d = (c.normal.0 * (x - c.origin.0) + c.normal.1 * (y - c.origin.1)).abs() - c.bias;
                (acc.0 + c.push.0 * d, acc.1 + c.push.1 * d)
            }),
            _ => (0.0, 0.0),
        }
    }

    /// Flat-page position of distorted pixel `p`, if the inversion converges.
    fn to_flat(&self, px: f64, py: f64, opts: &ResampleOptions) -> Option<(f64, f64)> {
        match self {
            Warp::Identity => Some((px, py)),
            Warp::Homography(m) => {
                let z = m[6] * px + m[7] * py + m[8];
                (z.abs() > 1e-12).then(|| ((m[0] * px + m[1] * py + m[2]) / z, (m[3] * px + m[4] * py + m[5]) / z))
            }
            _ => match invert_with(px, py, opts, |x, y| self.forward_displacement(x, y)) {
                BackwardMap::Mapped { x, y, .. } => Some((x, y)),
                BackwardMap::Diverged => None,
            },
        }
    }
}

/// Homography taking `from[i]` to `to[i]` for four point pairs.
fn homography_from_points(from: &[(f64, f64)], to: &[(f64, f64)]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for (k, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the augmented 8x9 system
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for k in col..9 {
            a[col][k] /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h
}

fn invert3(m: &[f64; 9]) -> [f64; 9] {
    let c = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    let det = m[0] * c[0] + m[1] * c[3] + m[2] * c[6];
    c.map(|v| v / det)
}

/// Inverse warp displacement `W^-1(p) - p` at every pixel, with no page
/// mask applied. Pixels where the inversion fails are masked out.
pub fn analytic_flow(width: usize, height: usize, spec: &DistortionSpec) -> Result<FlowField<f64>> {
    spec.validate()?;
    let warp = Warp::build(spec, width, height);
    let opts = ResampleOptions { max_iterations: 200, tolerance: 1e-3, ..ResampleOptions::default() };
    let rows: Vec<Vec<Option<(f64, f64)>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let (px, py) = (x as f64, y as f64);
                    warp.to_flat(px, py, &opts).map(|(fx, fy)| (fx - px, fy - py))
                })
                .collect()
        })
        .collect();
    let mut flow = FlowField::zeros(width, height)?;
    for (y, row) in rows.into_iter().enumerate() {
        for (x, value) in row.into_iter().enumerate() {
            flow.set(x, y, value);
        }
    }
    Ok(flow)
}

/// Analytic ground-truth flow of `spec` on a `width x height` page, masked
/// out where the preimage falls off the flat page.
pub fn ground_truth_flow(width: usize, height: usize, spec: &DistortionSpec) -> Result<FlowField<f64>> {
    let mut flow = analytic_flow(width, height, spec)?;
    let (maxx, maxy) = ((width - 1) as f64, (height - 1) as f64);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = flow.get(x, y);
            let (fx, fy) = (x as f64 + u, y as f64 + v);
            if flow.is_valid(x, y) && !(fx >= 0.0 && fy >= 0.0 && fx <= maxx && fy <= maxy) {
                flow.set(x, y, None);
            }
        }
    }
    Ok(flow)
}

/// Warps `flat` by a seeded distortion.
pub fn generate<T: Scalar>(flat: &RasterImage, spec: &DistortionSpec) -> Result<SyntheticSample<T>> {
    let (w, h) = (flat.width(), flat.height());
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::Size(format!("flat page must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")));
    }
    let flow = ground_truth_flow(w, h, spec)?;
    let c = flat.channels();
    let desk: Vec<f32> = match c {
        1 => vec![DESK[0]],
        3 => DESK.to_vec(),
        _ => vec![DESK[0], DESK[1], DESK[2], 1.0],
    };
    let mut data = vec![0.0f32; w * h * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let out = &mut row[x * c..(x + 1) * c];
            if flow.is_valid(x, y) {
                let (u, v) = flow.get(x, y);
                flat.sample_bilinear(x as f64 + u, y as f64 + v, out);
            } else {
                out.copy_from_slice(&desk);
            }
        }
    });
    Ok(SyntheticSample {
        flat: flat.clone(),
        distorted: RasterImage::from_data(w, h, c, data)?,
        gt_flow: flow.cast(),
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::gradient;
    use crate::metrics::{erode_mask, psnr};
    use crate::resample::rectify_with_coverage;

    fn max_jacobian(flow: &FlowField<f64>) -> f64 {
        let g = gradient(flow).unwrap();
        let mut worst = 0.0f64;
        for i in 0..g.gx_u.len() {
            if g.valid_x[i] && g.valid_y[i] {
                let (a, b, c, d) = (g.gx_u[i], g.gy_u[i], g.gx_v[i], g.gy_v[i]);
                // spectral norm of [[a, b], [c, d]]
                let s = a * a + b * b + c * c + d * d;
                let det = a * d - b * c;
                let norm = ((s + (s * s - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt();
                worst = worst.max(norm);
            }
        }
        worst
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let flat = test_page(0, 256, 300).unwrap();
        for kind in DistortionKind::ALL {
            let s = generate::<f32>(&flat, &DistortionSpec::new(kind, 5, 0.0)).unwrap();
            assert_eq!(s.distorted, flat);
            assert!(s.gt_flow.u().iter().chain(s.gt_flow.v()).all(|&v| v == 0.0));
            assert!(s.gt_flow.mask().iter().all(|&m| m));
        }
    }

    #[test]
    fn perspective_is_smooth_and_contracting() {
        for seed in 0..10 {
            let spec = DistortionSpec::new(DistortionKind::Perspective, seed, 0.5);
            let flow = ground_truth_flow(300, 400, &spec).unwrap();
            assert!(max_jacobian(&flow) < 1.0);
            // second differences stay small everywhere: no creases
            let g = gradient(&flow).unwrap();
            for y in 1..399 {
                for x in 1..299 {
                    let i = y * 300 + x;
                    if g.valid_x[i] && g.valid_x[i - 1] {
                        assert!((g.gx_u[i] - g.gx_u[i - 1]).abs() < 0.01);
                    }
                }
            }
        }
    }

    #[test]
    fn homography_hits_the_corners() {
        let from = [(0.0, 0.0), (10.0, 0.0), (10.0, 20.0), (0.0, 20.0)];
        let to = [(1.0, 2.0), (12.0, -1.0), (9.0, 22.0), (-2.0, 19.0)];
        let h = homography_from_points(&from, &to);
        for (&(x, y), &(u, v)) in from.iter().zip(&to) {
            let z = h[6] * x + h[7] * y + h[8];
            assert!(((h[0] * x + h[1] * y + h[2]) / z - u).abs() < 1e-9);
            assert!(((h[3] * x + h[4] * y + h[5]) / z - v).abs() < 1e-9);
        }
        let inv = invert3(&h);
        let z = inv[6] * 12.0 + inv[7] * -1.0 + inv[8];
        assert!(((inv[0] * 12.0 + inv[1] * -1.0 + inv[2]) / z - 10.0).abs() < 1e-9);
    }

    #[test]
    fn single_fold_kinks_along_its_crease() {
        let spec = DistortionSpec { creases: 1, ..DistortionSpec::new(DistortionKind::Folded, 11, 0.6) };
        let (w, h) = (320, 320);
        let flow = ground_truth_flow(w, h, &spec).unwrap();
        let warp = Warp::build(&spec, w, h);
        let Warp::Folded(creases) = &warp else { panic!() };
        let c = &creases[0];
        let g = gradient(&flow).unwrap();
        let mut kinks = 0;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let i = y * w + x;
                if !(g.valid_x[i] && g.valid_x[i + 1] && flow.is_valid(x, y)) {
                    continue;
                }
                // signed distance of the flat-page point to the crease
                let (u, v) = flow.get(x, y);
                let (fx, fy) = (x as f64 + u, y as f64 + v);
                let dist = c.normal.0 * (fx - c.origin.0) + c.normal.1 * (fy - c.origin.1);
                let jump = (g.gx_u[i + 1] - g.gx_u[i]).abs() + (g.gx_v[i + 1] - g.gx_v[i]).abs();
                if jump > 1e-3 {
                    kinks += 1;
                    assert!(dist.abs() < 3.0, "kink {dist} px off the crease at {x},{y}");
                }
                // the flow itself stays continuous
                assert!(g.gx_u[i].abs() < 1.0 && g.gx_v[i].abs() < 1.0);
            }
        }
        assert!(kinks > 0);
    }

    #[test]
    fn mask_points_into_the_page() {
        for kind in DistortionKind::ALL {
            let flow = ground_truth_flow(260, 300, &DistortionSpec::new(kind, 3, 0.8)).unwrap();
            assert!(flow.valid_count() < flow.len() || kind == DistortionKind::Folded);
            for y in 0..300 {
                for x in 0..260 {
                    if flow.is_valid(x, y) {
                        let (u, v) = flow.get(x, y);
                        let (fx, fy) = (x as f64 + u, y as f64 + v);
                        assert!((0.0..=259.0).contains(&fx) && (0.0..=299.0).contains(&fy));
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let flat = test_page(1, 256, 256).unwrap();
        let spec = DistortionSpec { creases: 3, ..DistortionSpec::new(DistortionKind::Folded, 42, 0.5) };
        let a = generate::<f32>(&flat, &spec).unwrap();
        let b = generate::<f32>(&flat, &spec).unwrap();
        assert_eq!(a.distorted, b.distorted);
        assert_eq!(a.gt_flow, b.gt_flow);
        let c = generate::<f32>(&flat, &DistortionSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.gt_flow, c.gt_flow);
    }

    #[test]
    fn round_trip_psnr() {
        let (w, h) = (256, 320);
        let pages: Vec<RasterImage> = (0..TEST_PAGE_COUNT).map(|i| test_page(i, w, h).unwrap()).collect();
        let mut worst = f64::INFINITY;
        for kind in DistortionKind::ALL {
            for seed in 0..20u64 {
                let spec = DistortionSpec {
                    creases: 1 + seed as usize % 4,
                    ..DistortionSpec::new(kind, seed, 0.5 * (seed % 5 + 1) as f64 / 5.0)
                };
                let s = generate::<f64>(&pages[seed as usize % TEST_PAGE_COUNT], &spec).unwrap();
                let r = rectify_with_coverage(&s.distorted, &s.gt_flow, &ResampleOptions::default()).unwrap();
                let mask = erode_mask(&r.coverage, w, h, 2);
                let p = psnr(&r.image, &s.flat, Some(&mask)).unwrap();
                worst = worst.min(p);
            }
        }
        assert!(worst >= 28.0, "worst round-trip PSNR {worst:.2} dB");
    }

    #[test]
    fn rejects_small_pages_and_bad_specs() {
        let small = RasterImage::filled(200, 300, &[1.0, 1.0, 1.0]).unwrap();
        let spec = DistortionSpec::new(DistortionKind::Curved, 0, 0.3);
        assert!(matches!(generate::<f32>(&small, &spec), Err(Error::Size(_))));
        assert!(DistortionSpec { magnitude: 1.5, ..spec.clone() }.validate().is_err());
        assert!(DistortionSpec { creases: 0, ..spec }.validate().is_err());
        assert_eq!("folded".parse::<DistortionKind>().unwrap(), DistortionKind::Folded);
        assert!("wavy".parse::<DistortionKind>().is_err());
    }
}
