//! On-disk dataset: PNG rasters plus a JSON manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<sample_id>.png          RGB, 8 bit
//! <root>/masks/<task_id>/<sample_id>.png gray, 8 bit, values 0 or 255
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::{synth_image, validate_tasks, ImageSample, Mask, TaskSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_VERSION: &str = "promptseg-synth/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub image: String,
    /// task id -> relative mask path
    pub masks: BTreeMap<usize, String>,
    pub task_ids: Vec<usize>,
    pub provenance_seed: u64,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskSpec>,
    pub samples: Vec<SampleEntry>,
    pub image_size: (usize, usize),
    pub generator_version: String,
    pub root_seed: u64,
    /// Unknown fields, kept so a read-modify-write preserves them.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Seed of sample `index`: `root_seed ^ mix64(index)`.
pub fn sample_seed(root_seed: u64, index: u64) -> u64 {
    root_seed ^ rng::mix64(index)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `sample` under `root`; returns the image path and mask paths
/// (relative) in task order.
fn write_sample(root: &Path, sample: &ImageSample, written: &mut Vec<PathBuf>) -> Result<(String, BTreeMap<usize, String>)> {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let d = sample.image.data();
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            rgb.put_pixel(x as u32, y as u32, image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])]));
        }
    }
    let rel_img = format!("images/{}.png", sample.sample_id);
    let path = root.join(&rel_img);
    written.push(path.clone());
    rgb.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    let mut masks = BTreeMap::new();
    for (&task, m) in &sample.masks {
        let dir = root.join("masks").join(task.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("masks/{task}/{}.png", sample.sample_id);
        let path = root.join(&rel);
        let gray = GrayImage::from_raw(w as u32, h as u32, m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect())
            .expect("mask buffer size");
        written.push(path.clone());
        gray.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        masks.insert(task, rel);
    }
    Ok((rel_img, masks))
}

/// Generates `n_samples` images into `out_dir`. On failure every file
/// written by this call is removed.
pub fn build_dataset(
    n_samples: usize,
    tasks: &[TaskSpec],
    size: (usize, usize),
    root_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_samples < 8 {
        return Err(Error::Precondition(format!("need at least 8 samples, got {n_samples}")));
    }
    validate_tasks(tasks)?;
    let mut written = Vec::new();
    let result = build_into(n_samples, tasks, size, root_seed, out_dir, &mut written);
    if result.is_err() {
        for p in written.iter().rev() {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn build_into(
    n_samples: usize,
    tasks: &[TaskSpec],
    size: (usize, usize),
    root_seed: u64,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let seed = sample_seed(root_seed, i as u64);
        let mut s = synth_image(tasks, seed, size)?;
        s.sample_id = sample_id(i);
        let (image, masks) = write_sample(out_dir, &s, written)?;
        samples.push(SampleEntry {
            sample_id: s.sample_id.clone(),
            image,
            task_ids: masks.keys().copied().collect(),
            masks,
            provenance_seed: seed,
            extra: Default::default(),
        });
    }
    let manifest = DatasetManifest {
        tasks: tasks.to_vec(),
        samples,
        image_size: size,
        generator_version: GENERATOR_VERSION.to_string(),
        root_seed,
        extra: Default::default(),
        root: out_dir.to_path_buf(),
    };
    let path = manifest.save()?;
    written.push(path);
    Ok(manifest)
}

impl DatasetManifest {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.json` atomically; returns its path.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        validate_tasks(&self.tasks)?;
        for s in &self.samples {
            if s.task_ids.is_empty() || s.task_ids.iter().any(|t| !self.tasks.iter().any(|k| k.task_id == *t)) {
                return Err(Error::Decode {
                    path: self.root.join(MANIFEST_FILE),
                    reason: format!("sample {} lists unknown or no tasks", s.sample_id),
                });
            }
        }
        Ok(())
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.sample_id.clone()).collect()
    }

    pub fn task(&self, task_id: usize) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Every referenced file exists.
    pub fn files_exist(&self) -> bool {
        self.samples
            .iter()
            .all(|s| self.root.join(&s.image).is_file() && s.masks.values().all(|m| self.root.join(m).is_file()))
    }

    pub fn load_sample(&self, sample_id: &str) -> Result<ImageSample> {
        let entry = self
            .samples
            .iter()
            .find(|s| s.sample_id == sample_id)
            .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?;
        let (h, w) = self.image_size;
        let path = self.root.join(&entry.image);
        let img = image::open(&path).map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
        let rgb = img.to_rgb8();
        if rgb.dimensions() != (w as u32, h as u32) {
            return Err(Error::Decode { path, reason: format!("expected {w}x{h}, found {:?}", rgb.dimensions()) });
        }
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + i] = f32::from(px[c]) / 255.0;
            }
        }
        let mut masks = BTreeMap::new();
        for (&task, rel) in &entry.masks {
            let path = self.root.join(rel);
            let img = image::open(&path).map_err(|e| Error::Decode { path: path.clone(), reason: e.to_string() })?;
            let gray = img.to_luma8();
            if gray.dimensions() != (w as u32, h as u32) {
                return Err(Error::Decode { path, reason: "mask size differs from image".into() });
            }
            let mut m = Mask::zeros(h, w);
            for (dst, &v) in m.data.iter_mut().zip(gray.as_raw()) {
                *dst = match v {
                    0 => 0,
                    255 => 1,
                    other => return Err(Error::Decode { path, reason: format!("mask value {other} is not 0 or 255") }),
                };
            }
            masks.insert(task, m);
        }
        Ok(ImageSample {
            sample_id: entry.sample_id.clone(),
            image: Tensor::from_vec(&[3, h, w], data),
            masks,
            provenance_seed: entry.provenance_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::default_tasks;

    #[test]
    fn build_then_load_round_trips_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = default_tasks(2);
        let m = build_dataset(8, &tasks, (32, 32), 77, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 8);
        assert_eq!(m.samples.iter().map(|s| s.masks.len()).sum::<usize>(), 16);
        assert!(m.files_exist());
        let reopened = DatasetManifest::open(dir.path()).unwrap();
        assert_eq!(reopened, m);
        for (i, entry) in m.samples.iter().enumerate() {
            let loaded = m.load_sample(&entry.sample_id).unwrap();
            let orig = synth_image(&tasks, sample_seed(77, i as u64), (32, 32)).unwrap();
            let q: Vec<f32> = orig.image.data().iter().map(|&v| f32::from(quantize(v)) / 255.0).collect();
            assert_eq!(loaded.image.data(), q.as_slice());
            assert_eq!(loaded.masks, orig.masks);
        }
    }

    #[test]
    fn rebuild_gives_identical_manifest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let tasks = default_tasks(2);
        build_dataset(8, &tasks, (32, 32), 5, a.path()).unwrap();
        build_dataset(8, &tasks, (32, 32), 5, b.path()).unwrap();
        let ta = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let tb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ta, tb);
        let pa = std::fs::read(a.path().join("images/s00003.png")).unwrap();
        let pb = std::fs::read(b.path().join("images/s00003.png")).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn unknown_fields_survive_a_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(8, &default_tasks(2), (32, 32), 1, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["curator"] = serde_json::json!("lab-7");
        v["samples"][0]["note"] = serde_json::json!("blurry");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let m = DatasetManifest::open(dir.path()).unwrap();
        m.save().unwrap();
        let back: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back["curator"], "lab-7");
        assert_eq!(back["samples"][0]["note"], "blurry");
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(8, &default_tasks(2), (32, 32), 1, dir.path()).unwrap();
        assert!(matches!(m.load_sample("nope"), Err(Error::UnknownSample(_))));
        let bad = dir.path().join(&m.samples[0].masks[&0]);
        GrayImage::from_raw(32, 32, vec![128; 32 * 32]).unwrap().save(&bad).unwrap();
        match m.load_sample(&m.samples[0].sample_id) {
            Err(Error::Decode { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected decode error, got {other:?}"),
        }
        assert!(matches!(build_dataset(4, &default_tasks(2), (32, 32), 1, dir.path()), Err(Error::Precondition(_))));
    }

    #[test]
    fn unwritable_destination_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        let err = build_dataset(8, &default_tasks(2), (32, 32), 1, &file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
