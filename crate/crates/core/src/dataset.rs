//! Dataset directory layout: manifest.json plus per-sample binaries
//! (images.bin, depth.bin, teacher.bin in tensor format) and rig.json /
//! scene.json.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, DepthBins};
use crate::error::{Error, Result};
use crate::lss::BevGridSpec;
use crate::rng::mix;
use crate::scene::{generate_scene, render_views, teacher_bev, Scene, SceneConfig};
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub bins: DepthBins,
    pub bev: BevGridSpec,
    pub scene: SceneConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            views: 6,
            height: 64,
            width: 112,
            patch: 16,
            channels: 64,
            bins: DepthBins::uniform(1.0, 9.0, 16).expect("valid bins"),
            bev: BevGridSpec::square(8.0, 32),
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub rig: CameraRig,
    /// (N, 3, H, W).
    pub images: Tensor,
    /// (N, H, W), infinity where no hit.
    pub depth_maps: Tensor,
    /// (C, nx, ny).
    pub teacher: Tensor,
}

/// Writes `scenes` reproducible samples under `dir`. Scene seeds derive from
/// the dataset seed and the sample index; teacher class embeddings derive
/// from the dataset seed alone so they are consistent across samples.
pub fn generate_dataset(dir: &Path, scenes: usize, spec: &DatasetSpec) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let rig = CameraRig::ring(spec.views, spec.width, spec.height)?;
    let mut samples = Vec::with_capacity(scenes);
    for idx in 0..scenes {
        let name = format!("sample_{idx:05}");
        let sample_dir = dir.join(&name);
        std::fs::create_dir_all(&sample_dir)?;

        let scene = generate_scene(mix(spec.seed, idx as u64), &spec.scene)?;
        let rendered = render_views(&scene, &rig, spec.scene.num_classes);
        let teacher = teacher_bev(&scene, &spec.bev, spec.channels, spec.seed);

        save_tensor(&sample_dir.join("images.bin"), "images", &rendered.images)?;
        save_tensor(&sample_dir.join("depth.bin"), "depth", &rendered.depth_maps)?;
        save_tensor(&sample_dir.join("teacher.bin"), "teacher", &teacher)?;
        rig.save_json(&sample_dir.join("rig.json"))?;
        std::fs::write(
            sample_dir.join("scene.json"),
            serde_json::to_string_pretty(&scene)?,
        )?;
        samples.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut manifest: Manifest = serde_json::from_str(&text)?;
    manifest.spec.bins.restore();
    Ok(manifest)
}

pub fn sample_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn load_sample(dir: &Path, manifest: &Manifest, name: &str) -> Result<Sample> {
    let sd = dir.join(name);
    let (_, images) = load_tensor(&sd.join("images.bin"))?;
    let (_, depth_maps) = load_tensor(&sd.join("depth.bin"))?;
    let (_, teacher) = load_tensor(&sd.join("teacher.bin"))?;
    let rig = CameraRig::load_json(
        &sd.join("rig.json"),
        manifest.spec.width,
        manifest.spec.height,
    )?;
    let scene: Scene = serde_json::from_str(&std::fs::read_to_string(sd.join("scene.json"))?)?;
    let n = manifest.spec.views;
    if images.shape() != [n, 3, manifest.spec.height, manifest.spec.width] {
        return Err(Error::Dataset(format!(
            "{name}: images shape {:?} does not match manifest",
            images.shape()
        )));
    }
    if teacher.shape() != [manifest.spec.channels, manifest.spec.bev.nx, manifest.spec.bev.ny] {
        return Err(Error::Dataset(format!(
            "{name}: teacher shape {:?} does not match manifest",
            teacher.shape()
        )));
    }
    Ok(Sample {
        scene,
        rig,
        images,
        depth_maps,
        teacher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            views: 2,
            channels: 8,
            bins: DepthBins::uniform(1.0, 9.0, 4).unwrap(),
            bev: BevGridSpec::square(8.0, 8),
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generate_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let manifest = generate_dataset(dir.path(), 3, &spec).unwrap();
        assert_eq!(manifest.samples.len(), 3);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        let sample = load_sample(dir.path(), &loaded, "sample_00001").unwrap();
        assert_eq!(sample.images.shape(), &[2, 3, 64, 112]);
        assert_eq!(sample.depth_maps.shape(), &[2, 64, 112]);
        assert_eq!(sample.teacher.shape(), &[8, 8, 8]);
        assert!(!sample.scene.objects.is_empty());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate_dataset(a.path(), 2, &spec).unwrap();
        generate_dataset(b.path(), 2, &spec).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            let other = b.path().join(rel);
            let x = std::fs::read(&entry).unwrap();
            let y = std::fs::read(&other).unwrap();
            assert_eq!(x, y, "{} differs", rel.display());
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }
}
