//! Dataset evaluation harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{erode_mask, nepe, ocr_accuracy_checked, psnr};
use crate::error::{Error, Result};
use crate::flowest::epe;
use crate::imagecore::{load_flow, load_image, save_image, FlowField, RasterImage};
use crate::pipeline::{anchor_ground_truth, rectify, PipelineConfig, StageTimings};
use crate::resample::{coverage_of, ResampleOptions};
use crate::synthgen::{list_samples, load_manifest, sample_path};

/// Placeholder replaced by the rectified image path in an OCR command.
pub const OCR_IMAGE_PLACEHOLDER: &str = "{image}";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Shell command printing recognized text for `{image}` on stdout.
    /// Without it, recognized text is read from `<name>_ocr.txt`.
    pub ocr_command: Option<String>,
    /// Where `<name>_rectified.png` is written; needed by `ocr_command`.
    pub rectified_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub name: String,
    pub kind: Option<String>,
    /// Pixels, at processing resolution.
    pub epe: f64,
    pub nepe: f64,
    /// Against `<name>_flat.png` when present.
    pub psnr: Option<f64>,
    /// Percent, when recognized and reference text are available.
    pub ocr_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleRow>,
    pub mean_epe: f64,
    pub mean_nepe: f64,
    pub mean_psnr: Option<f64>,
    pub mean_ocr_accuracy: Option<f64>,
    /// Mean seconds per stage. The only field that varies between runs.
    pub runtime: StageTimings,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// PSNR of a rectified image against the flat page shifted like the
/// reconstruction (which is zero at `reference_point` instead of matching
/// the ground truth there), over output pixels that land on the page,
/// eroded by 2 px. All inputs are at processing resolution.
pub fn rectification_psnr<T: crate::Scalar>(
    rectified: &RasterImage,
    flow: &FlowField<T>,
    gt: &FlowField<T>,
    flat: &RasterImage,
    reference_point: (usize, usize),
    opts: &ResampleOptions,
) -> Result<f64> {
    let (w, h) = (flow.width(), flow.height());
    let (cu, cv) = gt.get(reference_point.0, reference_point.1);
    let c = flat.channels();
    let mut px = vec![0.0f32; c];
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            flat.sample_bilinear(x as f64 + cu.f64(), y as f64 + cv.f64(), &mut px);
            data.extend_from_slice(&px);
        }
    }
    let shifted = RasterImage::from_data(w, h, c, data)?;
    let page = coverage_of(flow, gt.mask(), opts)?;
    let mask = erode_mask(&page, w, h, 2);
    let out = if rectified.channels() == c { rectified.clone() } else { rectified.to_rgb() };
    let shifted = if shifted.channels() == out.channels() { shifted } else { shifted.to_rgb() };
    psnr(&out, &shifted, Some(&mask))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

fn run_ocr(template: &str, image: &Path) -> Result<String> {
    let cmd = template.replace(OCR_IMAGE_PLACEHOLDER, &shell_quote(image));
    let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| Error::io(image, e))?;
    if !out.status.success() {
        return Err(Error::Format(format!(
            "OCR command `{cmd}` failed with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

struct SampleResult {
    row: SampleRow,
    timings: StageTimings,
    warnings: Vec<String>,
}

fn evaluate_sample(dir: &Path, name: &str, cfg: &PipelineConfig, opts: &EvalOptions) -> Result<SampleResult> {
    let img_path = sample_path(dir, name, "img.png");
    let flow_path = sample_path(dir, name, "flow.dfl");
    if !flow_path.exists() {
        return Err(Error::MissingFiles(flow_path.display().to_string()));
    }
    let input = load_image(&img_path)?;
    let gt = load_flow::<f64>(&flow_path)?;
    let kind = load_manifest(dir, name)?.map(|m| m.spec.kind.name().to_string());

    let out = rectify(&input, cfg, Some(&gt))?;
    let d = &out.diagnostics;
    let (w, h) = (d.processing_size[0], d.processing_size[1]);
    let gt = gt.resize(w, h)?;
    let point = (d.reference_point[0], d.reference_point[1]);
    let anchored = anchor_ground_truth(&gt, point);
    let mut warnings = Vec::new();

    let flat_path = sample_path(dir, name, "flat.png");
    let psnr = if flat_path.exists() {
        let flat = load_image(&flat_path)?.resize(w, h)?;
        let rectified = if cfg.upscale_output { out.image.resize(w, h)? } else { out.image.clone() };
        Some(rectification_psnr(&rectified, &out.flow, &gt, &flat, point, &cfg.resample)?)
    } else {
        None
    };

    let rectified_path = match &opts.rectified_dir {
        Some(rd) => {
            let p = rd.join(format!("{name}_rectified.png"));
            save_image(&out.image, &p)?;
            Some(p)
        }
        None => None,
    };
    let truth_path = sample_path(dir, name, "truth.txt");
    let recognized = match (&opts.ocr_command, &rectified_path) {
        (Some(cmd), Some(p)) => Some(run_ocr(cmd, p)?),
        (Some(_), None) => return Err(Error::Config("an OCR command needs a directory for rectified images".into())),
        (None, _) => {
            let p = sample_path(dir, name, "ocr.txt");
            if p.exists() {
                Some(read_text(&p)?)
            } else {
                None
            }
        }
    };
    let ocr_accuracy = match recognized {
        Some(text) if truth_path.exists() => {
            let truth = read_text(&truth_path)?;
            match ocr_accuracy_checked(text.trim(), truth.trim()) {
                Ok((acc, warning)) => {
                    warnings.extend(warning.map(|w| format!("{name}: {w}")));
                    Some(acc)
                }
                Err(Error::BothEmpty) => {
                    warnings.push(format!("{name}: recognized and reference text are both empty"));
                    None
                }
                Err(e) => return Err(e),
            }
        }
        Some(_) => {
            warnings.push(format!("{name}: recognized text without {}", truth_path.display()));
            None
        }
        None => None,
    };

    let row = SampleRow {
        name: name.to_string(),
        kind,
        epe: epe(&out.flow, &anchored)?,
        nepe: nepe(&out.flow, &anchored)?,
        psnr,
        ocr_accuracy,
    };
    Ok(SampleResult { row, timings: d.timings.clone(), warnings })
}

/// Runs the pipeline on every `<name>_img.png` / `<name>_flow.dfl` pair in
/// `dir` and scores the reconstructed flows. Samples run in parallel; rows
/// follow sorted sample names.
pub fn evaluate_pipeline(dir: &Path, cfg: &PipelineConfig, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    if opts.ocr_command.is_some() && opts.rectified_dir.is_none() {
        return Err(Error::Config("an OCR command needs a directory for rectified images".into()));
    }
    if let Some(rd) = &opts.rectified_dir {
        std::fs::create_dir_all(rd).map_err(|e| Error::io(rd, e))?;
    }
    let names = list_samples(dir)?;
    if names.is_empty() {
        return Err(Error::MissingFiles(format!("no *_img.png samples in {}", dir.display())));
    }
    let results: Vec<SampleResult> =
        names.par_iter().map(|name| evaluate_sample(dir, name, cfg, opts)).collect::<Result<_>>()?;

    let n = results.len() as f64;
    let mut runtime = StageTimings::default();
    for r in &results {
        let t = &r.timings;
        runtime.resize += t.resize / n;
        runtime.partition += t.partition / n;
        runtime.estimate += t.estimate / n;
        runtime.stitch += t.stitch / n;
        runtime.reconstruct += t.reconstruct / n;
        runtime.resample += t.resample / n;
        runtime.illumination += t.illumination / n;
        runtime.total += t.total / n;
    }
    let rows: Vec<SampleRow> = results.iter().map(|r| r.row.clone()).collect();
    Ok(EvalReport {
        mean_epe: mean(rows.iter().map(|r| r.epe)).unwrap_or(0.0),
        mean_nepe: mean(rows.iter().map(|r| r.nepe)).unwrap_or(0.0),
        mean_psnr: mean(rows.iter().filter_map(|r| r.psnr)),
        mean_ocr_accuracy: mean(rows.iter().filter_map(|r| r.ocr_accuracy)),
        warnings: results.into_iter().flat_map(|r| r.warnings).collect(),
        samples: rows,
        runtime,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned-column text table with a mean row and stage runtimes.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"));
        let mut rows: Vec<[String; 6]> = vec![[
            "sample".into(),
            "kind".into(),
            "epe".into(),
            "nepe".into(),
            "psnr".into(),
            "ocr".into(),
        ]];
        for r in &self.samples {
            rows.push([
                r.name.clone(),
                r.kind.clone().unwrap_or_else(|| "-".into()),
                format!("{:.4}", r.epe),
                format!("{:.6}", r.nepe),
                opt(r.psnr, 2),
                opt(r.ocr_accuracy, 2),
            ]);
        }
        rows.push([
            "mean".into(),
            String::new(),
            format!("{:.4}", self.mean_epe),
            format!("{:.6}", self.mean_nepe),
            opt(self.mean_psnr, 2),
            opt(self.mean_ocr_accuracy, 2),
        ]);
        let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| if c < 2 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        let t = &self.runtime;
        writeln!(
            out,
            "runtime (s/sample): resize {:.3}  partition {:.3}  estimate {:.3}  stitch {:.3}  reconstruct {:.3}  resample {:.3}  illumination {:.3}  total {:.3}",
            t.resize, t.partition, t.estimate, t.stitch, t.reconstruct, t.resample, t.illumination, t.total
        )
        .unwrap();
        for w in &self.warnings {
            writeln!(out, "warning: {w}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::SolverOptions;
    use crate::synthgen::{generate_dataset, DatasetOptions};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            processing_width: 256,
            patch_size: 48,
            solver: SolverOptions { downsample_factor: 4, ..SolverOptions::default() },
            ..PipelineConfig::default()
        }
    }

    fn dataset(magnitude: f64, count: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions { count, magnitude, width: 256, height: 320, seed: 11, ..DatasetOptions::default() };
        generate_dataset(dir.path(), &opts).unwrap();
        dir
    }

    #[test]
    fn identity_dataset_has_zero_error() {
        let dir = dataset(0.0, 3);
        let report = evaluate_pipeline(dir.path(), &small_config(), &EvalOptions::default()).unwrap();
        assert_eq!(report.samples.len(), 3);
        assert!(report.mean_epe < 1e-4, "{}", report.mean_epe);
        assert!(report.samples.iter().all(|r| r.psnr.unwrap() >= 50.0));
        assert!(report.runtime.total >= 0.0);
    }

    #[test]
    fn report_is_deterministic_apart_from_runtime() {
        let dir = dataset(0.4, 3);
        let a = evaluate_pipeline(dir.path(), &small_config(), &EvalOptions::default()).unwrap();
        let b = evaluate_pipeline(dir.path(), &small_config(), &EvalOptions::default()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.mean_epe <= 1.0, "{}", a.mean_epe);
        assert_eq!(a.samples[1].kind.as_deref(), Some("curved"));
        let table = a.to_table();
        assert_eq!(table.lines().count(), 1 + 3 + 1 + 1);
        let back: EvalReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn ocr_text_files_and_command() {
        let dir = dataset(0.0, 1);
        let name = &list_samples(dir.path()).unwrap()[0];
        std::fs::write(sample_path(dir.path(), name, "truth.txt"), "abcd\n").unwrap();
        std::fs::write(sample_path(dir.path(), name, "ocr.txt"), "abcf\n").unwrap();
        let report = evaluate_pipeline(dir.path(), &small_config(), &EvalOptions::default()).unwrap();
        assert_eq!(report.samples[0].ocr_accuracy, Some(75.0));

        let out = tempfile::tempdir().unwrap();
        let opts = EvalOptions {
            ocr_command: Some("test -f {image} && printf abcd".into()),
            rectified_dir: Some(out.path().to_path_buf()),
        };
        let report = evaluate_pipeline(dir.path(), &small_config(), &opts).unwrap();
        assert_eq!(report.samples[0].ocr_accuracy, Some(100.0));
        assert!(out.path().join(format!("{name}_rectified.png")).exists());

        let no_dir = EvalOptions { ocr_command: Some("true".into()), rectified_dir: None };
        assert!(matches!(evaluate_pipeline(dir.path(), &small_config(), &no_dir), Err(Error::Config(_))));
    }

    #[test]
    fn missing_files() {
        let empty = tempfile::tempdir().unwrap();
        let err = evaluate_pipeline(empty.path(), &small_config(), &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingFiles(_)));
        let dir = dataset(0.0, 1);
        let name = &list_samples(dir.path()).unwrap()[0];
        std::fs::remove_file(sample_path(dir.path(), name, "flow.dfl")).unwrap();
        let err = evaluate_pipeline(dir.path(), &small_config(), &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingFiles(_)));
    }
}
