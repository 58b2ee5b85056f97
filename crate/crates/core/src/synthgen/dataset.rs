//! On-disk synthetic datasets.
//!
//! Each sample `<name>` is stored as `<name>_img.png` (distorted),
//! `<name>_flow.dfl` (ground truth), `<name>_flowvis.png`, `<name>_flat.png`
//! and `<name>_manifest.json`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, test_page, DistortionKind, DistortionSpec, SyntheticSample, TEST_PAGE_COUNT};
use crate::error::{Error, Result};
use crate::imagecore::{flow_to_rgb, save_flow, save_image};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub name: String,
    pub spec: DistortionSpec,
    /// Index of the built-in test page, when one was used.
    pub page: Option<usize>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub count: usize,
    pub kinds: Vec<DistortionKind>,
    pub magnitude: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { count: 5, kinds: DistortionKind::ALL.to_vec(), magnitude: 0.4, seed: 0, width: 1200, height: 1600 }
    }
}

pub fn sample_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}"))
}

/// Specs for a dataset: kinds cycle in order, seeds come from one stream.
pub fn dataset_specs(opts: &DatasetOptions) -> Result<Vec<(String, DistortionSpec, usize)>> {
    if opts.kinds.is_empty() {
        return Err(Error::Config("at least one distortion kind is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.count)
        .map(|i| {
            let kind = opts.kinds[i % opts.kinds.len()];
            let mut spec = DistortionSpec::new(kind, rng.random(), opts.magnitude);
            if kind == DistortionKind::Folded {
                spec.creases = rng.random_range(1..=2);
            }
            spec.validate()?;
            Ok((format!("{i:04}_{}", kind.name()), spec, i % TEST_PAGE_COUNT))
        })
        .collect()
}

pub fn write_sample<T: Scalar>(dir: &Path, manifest: &SampleManifest, sample: &SyntheticSample<T>) -> Result<()> {
    let name = &manifest.name;
    let (w, h) = (sample.gt_flow.width(), sample.gt_flow.height());
    save_image(&sample.distorted, sample_path(dir, name, "img.png"))?;
    save_image(&sample.flat, sample_path(dir, name, "flat.png"))?;
    save_flow(&sample.gt_flow, sample_path(dir, name, "flow.dfl"))?;
    save_image(&flow_to_rgb(&sample.gt_flow, w, h), sample_path(dir, name, "flowvis.png"))?;
    let path = sample_path(dir, name, "manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Renders and writes a dataset; samples are generated in parallel.
pub fn generate_dataset(dir: &Path, opts: &DatasetOptions) -> Result<Vec<SampleManifest>> {
    let specs = dataset_specs(opts)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    specs
        .into_par_iter()
        .map(|(name, spec, page)| {
            let flat = test_page(page, opts.width, opts.height)?;
            let sample = generate::<f32>(&flat, &spec)?;
            let manifest = SampleManifest { name, spec, page: Some(page), width: opts.width, height: opts.height };
            write_sample(dir, &manifest, &sample)?;
            Ok(manifest)
        })
        .collect()
}

/// Sample names in a dataset directory (files ending in `_img.png`), sorted.
pub fn list_samples(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str().and_then(|f| f.strip_suffix("_img.png")) {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_manifest(dir: &Path, name: &str) -> Result<Option<SampleManifest>> {
    let path = sample_path(dir, name, "manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{load_flow, load_image};

    #[test]
    fn specs_are_deterministic_and_cycle_kinds() {
        let opts = DatasetOptions { count: 7, seed: 3, ..DatasetOptions::default() };
        let a = dataset_specs(&opts).unwrap();
        assert_eq!(a, dataset_specs(&opts).unwrap());
        let kinds: Vec<_> = a.iter().map(|(_, s, _)| s.kind).collect();
        assert_eq!(kinds[3], DistortionKind::Perspective);
        assert_eq!(kinds[5], DistortionKind::Folded);
        assert_eq!(a[6].0, "0006_perspective");
        assert!(dataset_specs(&DatasetOptions { kinds: vec![], ..opts }).is_err());
    }

    #[test]
    fn written_dataset_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions { count: 2, width: 256, height: 320, magnitude: 0.3, ..DatasetOptions::default() };
        let manifests = generate_dataset(dir.path(), &opts).unwrap();
        let names = list_samples(dir.path()).unwrap();
        assert_eq!(names, vec!["0000_perspective", "0001_curved"]);
        let m = load_manifest(dir.path(), &names[1]).unwrap().unwrap();
        assert_eq!(m, manifests[1]);
        let flow = load_flow::<f32>(sample_path(dir.path(), &names[1], "flow.dfl")).unwrap();
        assert_eq!((flow.width(), flow.height()), (256, 320));
        let img = load_image(sample_path(dir.path(), &names[1], "img.png")).unwrap();
        assert_eq!((img.width(), img.height()), (256, 320));
        assert!(load_manifest(dir.path(), "missing").unwrap().is_none());
    }
}
