//! End-to-end rectification: resize, partition, estimate, stitch,
//! reconstruct, resample, illumination.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowest::{estimate_patches, EstimatorConfig, PatchFlowEstimate};
use crate::illum::{remove_shading, sauvola_binarize, IllumMode, SauvolaParams};
use crate::imagecore::{load_image, FlowField, RasterImage};
use crate::patching::{build_grid, nearest_valid, PatchGrid};
use crate::poisson::{downsample_flow, solve, upsample_flow, ScreenedPoissonProblem, SolverOptions, DEFAULT_LAMBDA};
use crate::resample::{rectify_with_coverage, ResampleOptions};
use crate::scalar::Scalar;
use crate::stitch::{assemble_gradient, optimize_indices, patch_gradients, IndexMap, StitchedGradient};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IllumConfig {
    pub mode: IllumMode,
    pub sauvola: SauvolaParams,
    pub blur_radius: usize,
    /// Corrected image used by [`IllumMode::External`].
    pub external_path: Option<PathBuf>,
}

impl Default for IllumConfig {
    fn default() -> Self {
        Self { mode: IllumMode::None, sauvola: SauvolaParams::default(), blur_radius: 24, external_path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub processing_width: usize,
    pub patch_size: usize,
    pub estimator: EstimatorConfig,
    pub solver: SolverOptions,
    pub lambda: f64,
    pub resample: ResampleOptions,
    pub illum: IllumConfig,
    /// Resize the output image back to the input resolution.
    pub upscale_output: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            processing_width: 1200,
            patch_size: 96,
            estimator: EstimatorConfig::default(),
            solver: SolverOptions::default(),
            lambda: DEFAULT_LAMBDA,
            resample: ResampleOptions::default(),
            illum: IllumConfig::default(),
            upscale_output: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.solver.validate()?;
        self.resample.validate()?;
        let f = self.solver.downsample_factor;
        if self.processing_width % f != 0 || self.patch_size % f != 0 {
            return Err(Error::Config(format!(
                "processing_width {} and patch_size {} must be multiples of the downsample factor {f}",
                self.processing_width, self.patch_size
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.illum.mode == IllumMode::External && self.illum.external_path.is_none() {
            return Err(Error::Config("external illumination needs illum.external_path".into()));
        }
        Ok(())
    }

    /// Processing size for an input: width fixed, height aspect-preserving
    /// and rounded to a multiple of the downsample factor.
    pub fn processing_size(&self, width: usize, height: usize) -> (usize, usize) {
        let f = self.solver.downsample_factor;
        let h = (height as f64 * self.processing_width as f64 / width as f64 / f as f64).round() as usize * f;
        (self.processing_width, h.max(f))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub resize: f64,
    pub partition: f64,
    pub estimate: f64,
    pub stitch: f64,
    pub reconstruct: f64,
    pub resample: f64,
    pub illumination: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub input_size: [usize; 2],
    pub processing_size: [usize; 2],
    pub downsample_factor: usize,
    pub patches: usize,
    pub reference_patch: usize,
    /// Processing-resolution pixel at which the reconstructed flow is zero.
    pub reference_point: [usize; 2],
    pub energy_initial: f64,
    pub energy_final: f64,
    pub cg_iterations: [usize; 2],
    pub cg_residuals: [f64; 2],
    pub diverged_pixels: usize,
    pub out_of_bounds_pixels: usize,
    /// Seconds per stage.
    pub timings: StageTimings,
}

#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub flow: FlowField<T>,
    /// At the stitching resolution (coarse on the fast path).
    pub index_map: IndexMap,
    pub stitched: StitchedGradient<T>,
    pub reference_patch: usize,
    pub reference_point: (usize, usize),
    pub cg_iterations: [usize; 2],
    pub cg_residuals: [f64; 2],
    pub stitch_seconds: f64,
    pub solve_seconds: f64,
}

/// Stitches patch estimates and integrates them into a full-image flow,
/// anchored on the center-most patch. With a downsample factor above one
/// the estimates are block-averaged first and the solution upsampled.
pub fn reconstruct_flow<T: Scalar>(
    grid: &PatchGrid,
    estimates: &[PatchFlowEstimate<T>],
    cfg: &PipelineConfig,
) -> Result<Reconstruction<T>> {
    if estimates.len() != grid.len() {
        return Err(Error::CountMismatch { expected: grid.len(), actual: estimates.len() });
    }
    let f = cfg.solver.downsample_factor;
    let reference = grid.center_most();
    let ref_spec = grid.patches()[reference];
    let ref_local = nearest_valid(&estimates[reference].flow, ref_spec.size / 2, ref_spec.size / 2)
        .unwrap_or((ref_spec.size / 2, ref_spec.size / 2));
    let reference_point = (ref_spec.origin_x + ref_local.0, ref_spec.origin_y + ref_local.1);

    let t = Instant::now();
    let work_grid = grid.downsample(f)?;
    let work: Vec<PatchFlowEstimate<T>> = if f == 1 {
        estimates.to_vec()
    } else {
        estimates
            .iter()
            .zip(work_grid.patches())
            .map(|(e, spec)| Ok(PatchFlowEstimate { spec: *spec, flow: downsample_flow(&e.flow, f)? }))
            .collect::<Result<_>>()?
    };
    let grads = patch_gradients(&work)?;
    let index_map = optimize_indices(&work_grid, &grads)?;
    let stitched = assemble_gradient(&work_grid, &grads, &index_map)?;
    let stitch_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let problem = ScreenedPoissonProblem::with_reference_patch(
        stitched.clone(),
        &work_grid.patches()[reference],
        &work[reference].flow,
        cfg.lambda,
    )?;
    let solution = solve(&problem, &SolverOptions { downsample_factor: 1, ..cfg.solver.clone() })?;
    let flow = if f == 1 {
        solution.flow
    } else {
        upsample_flow(&solution.flow, f, grid.image_width, grid.image_height)?
    };
    let solve_seconds = t.elapsed().as_secs_f64();
    Ok(Reconstruction {
        flow,
        index_map,
        stitched,
        reference_patch: reference,
        reference_point,
        cg_iterations: solution.iterations,
        cg_residuals: solution.residuals,
        stitch_seconds,
        solve_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub image: RasterImage,
    /// Reconstructed flow at processing resolution.
    pub flow: FlowField<T>,
    /// Output pixels that received a source color (processing resolution).
    pub coverage: Vec<bool>,
    /// Index map at the stitching resolution.
    pub index_map: IndexMap,
    /// Stitched gradient at the stitching resolution.
    pub stitched: StitchedGradient<T>,
    pub diagnostics: Diagnostics,
}

/// Runs the whole pipeline. `gt` (ground-truth flow at input or processing
/// resolution) is required by the oracle estimators.
pub fn rectify<T: Scalar>(
    input: &RasterImage,
    cfg: &PipelineConfig,
    gt: Option<&FlowField<T>>,
) -> Result<PipelineOutput<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let (in_w, in_h) = (input.width(), input.height());
    let (w, h) = cfg.processing_size(in_w, in_h);

    let t = Instant::now();
    let img = input.resize(w, h)?;
    let gt = match gt {
        Some(g) if g.width() == w && g.height() == h => Some(g.clone()),
        Some(g) if g.width() == in_w && g.height() == in_h => Some(g.resize(w, h)?),
        Some(g) => {
            return Err(Error::DimMismatch(format!(
                "ground truth {}x{} matches neither input {in_w}x{in_h} nor processing {w}x{h}",
                g.width(),
                g.height()
            )))
        }
        None => None,
    };
    timings.resize = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let grid = build_grid(w, h, cfg.patch_size)?;
    timings.partition = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let estimates = estimate_patches(&img, &grid, &cfg.estimator, gt.as_ref())?;
    timings.estimate = t.elapsed().as_secs_f64();

    let rec = reconstruct_flow(&grid, &estimates, cfg)?;
    timings.stitch = rec.stitch_seconds;
    timings.reconstruct = rec.solve_seconds;

    let t = Instant::now();
    let rectified = rectify_with_coverage(&img, &rec.flow, &cfg.resample)?;
    timings.resample = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut image = apply_illumination(&rectified.image, &cfg.illum)?;
    if cfg.upscale_output {
        image = image.resize(in_w, in_h)?;
    }
    timings.illumination = t.elapsed().as_secs_f64();
    timings.total = start.elapsed().as_secs_f64();

    let diagnostics = Diagnostics {
        input_size: [in_w, in_h],
        processing_size: [w, h],
        downsample_factor: cfg.solver.downsample_factor,
        patches: grid.len(),
        reference_patch: rec.reference_patch,
        reference_point: [rec.reference_point.0, rec.reference_point.1],
        energy_initial: rec.index_map.initial_energy,
        energy_final: rec.index_map.energy,
        cg_iterations: rec.cg_iterations,
        cg_residuals: rec.cg_residuals,
        diverged_pixels: rectified.diverged,
        out_of_bounds_pixels: rectified.out_of_bounds,
        timings,
    };
    Ok(PipelineOutput {
        image,
        flow: rec.flow,
        coverage: rectified.coverage,
        index_map: rec.index_map,
        stitched: rec.stitched,
        diagnostics,
    })
}

pub fn apply_illumination(img: &RasterImage, cfg: &IllumConfig) -> Result<RasterImage> {
    match cfg.mode {
        IllumMode::None => Ok(img.clone()),
        IllumMode::Binarize => sauvola_binarize(img, &cfg.sauvola),
        IllumMode::Deshade => remove_shading(img, cfg.blur_radius),
        IllumMode::External => {
            let path = cfg.external_path.as_ref().expect("validated");
            let out = load_image(path)?;
            if out.width() != img.width() || out.height() != img.height() {
                return Err(Error::DimMismatch(format!(
                    "{} is {}x{}, expected {}x{}",
                    path.display(),
                    out.width(),
                    out.height(),
                    img.width(),
                    img.height()
                )));
            }
            Ok(out)
        }
    }
}

/// Ground truth re-anchored like a reconstruction: zero at `point`.
pub fn anchor_ground_truth<T: Scalar>(gt: &FlowField<T>, point: (usize, usize)) -> FlowField<T> {
    let (u, v) = gt.get(point.0, point.1);
    gt.offset(-u, -v)
}
