//! Patch flow estimators and the endpoint error.
//!
//! The learned estimator is represented by [`EstimatorKind::External`], which
//! reads per-patch flow files produced elsewhere. The oracle kinds crop a
//! known ground-truth flow and are used to exercise the stitching pipeline.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_flow, FlowField, RasterImage};
use crate::patching::{nearest_valid, rereference_at, PatchGrid, PatchSpec};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[default]
    Oracle,
    NoisyOracle,
    External,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "noisy-oracle" => Ok(Self::NoisyOracle),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Std. dev. of i.i.d. per-pixel noise, pixels.
    pub noise_sigma: f64,
    /// Std. dev. of the constant offset added to each patch, pixels.
    pub offset_sigma: f64,
    pub seed: u64,
    /// Directory of `patch_<row>_<col>.dfl` files for the external kind.
    pub external_dir: Option<PathBuf>,
}

impl EstimatorConfig {
    pub fn oracle() -> Self {
        Self::default()
    }

    pub fn noisy(noise_sigma: f64, offset_sigma: f64, seed: u64) -> Self {
        Self { kind: EstimatorKind::NoisyOracle, noise_sigma, offset_sigma, seed, external_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.offset_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma and offset_sigma must be non-negative".into()));
        }
        if self.kind == EstimatorKind::External && self.external_dir.is_none() {
            return Err(Error::Config("external estimator needs external_dir".into()));
        }
        Ok(())
    }
}

/// Patch-local flow, referenced to the patch center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFlowEstimate<T> {
    pub spec: PatchSpec,
    pub flow: FlowField<T>,
}

pub fn patch_file_name(row: usize, col: usize) -> String {
    format!("patch_{row}_{col}.dfl")
}

/// Re-references at the patch center, or at the nearest masked-in pixel when
/// the center itself is masked out. Fully masked patches stay zero.
pub(crate) fn center_reference<T: Scalar>(flow: &FlowField<T>) -> FlowField<T> {
    let (cx, cy) = (flow.width() / 2, flow.height() / 2);
    match nearest_valid(flow, cx, cy) {
        Some((x, y)) => rereference_at(flow, x, y),
        None => flow.clone(),
    }
}

pub fn estimate_patches<T: Scalar>(
    img: &RasterImage,
    grid: &PatchGrid,
    cfg: &EstimatorConfig,
    gt: Option<&FlowField<T>>,
) -> Result<Vec<PatchFlowEstimate<T>>> {
    cfg.validate()?;
    if img.width() != grid.image_width || img.height() != grid.image_height {
        return Err(Error::DimMismatch(format!(
            "image {}x{} vs grid {}x{}",
            img.width(),
            img.height(),
            grid.image_width,
            grid.image_height
        )));
    }
    match cfg.kind {
        EstimatorKind::Oracle | EstimatorKind::NoisyOracle => {
            let gt = gt.ok_or(Error::MissingGroundTruth)?;
            if gt.width() != grid.image_width || gt.height() != grid.image_height {
                return Err(Error::DimMismatch(format!(
                    "ground truth {}x{} vs image {}x{}",
                    gt.width(),
                    gt.height(),
                    grid.image_width,
                    grid.image_height
                )));
            }
            grid.patches()
                .par_iter()
                .enumerate()
                .map(|(i, spec)| {
                    let crop = gt.crop(spec.origin_x, spec.origin_y, spec.size, spec.size)?;
                    let flow = if cfg.kind == EstimatorKind::NoisyOracle {
                        corrupt(&crop, cfg, i as u64)?
                    } else {
                        crop
                    };
                    Ok(PatchFlowEstimate { spec: *spec, flow: center_reference(&flow) })
                })
                .collect()
        }
        EstimatorKind::External => {
            let dir = cfg.external_dir.as_deref().expect("validated");
            grid.patches()
                .par_iter()
                .map(|spec| read_external(dir, spec))
                .collect()
        }
    }
}

fn corrupt<T: Scalar>(flow: &FlowField<T>, cfg: &EstimatorConfig, stream: u64) -> Result<FlowField<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let offset = Normal::new(0.0, cfg.offset_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (du, dv) = (offset.sample(&mut rng), offset.sample(&mut rng));
    let mut u = flow.u().to_vec();
    let mut v = flow.v().to_vec();
    for i in 0..flow.len() {
        u[i] += T::of(du + noise.sample(&mut rng));
        v[i] += T::of(dv + noise.sample(&mut rng));
    }
    FlowField::from_parts(flow.width(), flow.height(), u, v, flow.mask().to_vec())
}

fn read_external<T: Scalar>(dir: &Path, spec: &PatchSpec) -> Result<PatchFlowEstimate<T>> {
    let path = dir.join(patch_file_name(spec.row, spec.col));
    if !path.exists() {
        return Err(Error::MissingExternalFile(path));
    }
    let flow = load_flow::<T>(&path)?;
    if flow.width() != spec.size || flow.height() != spec.size {
        return Err(Error::DimMismatch(format!(
            "{} is {}x{}, patch size is {}",
            path.display(),
            flow.width(),
            flow.height(),
            spec.size
        )));
    }
    Ok(PatchFlowEstimate { spec: *spec, flow: center_reference(&flow) })
}

/// Mean endpoint error over pixels valid in both flows.
pub fn epe<T: Scalar>(a: &FlowField<T>, b: &FlowField<T>) -> Result<f64> {
    mean_over_mask(a, b, 1.0, 1.0)
}

pub(crate) fn mean_over_mask<T: Scalar>(a: &FlowField<T>, b: &FlowField<T>, sx: f64, sy: f64) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..a.len() {
        if a.mask()[i] && b.mask()[i] {
            let du = (a.u()[i].f64() - b.u()[i].f64()) / sx;
            let dv = (a.v()[i].f64() - b.v()[i].f64()) / sy;
            sum += (du * du + dv * dv).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}
