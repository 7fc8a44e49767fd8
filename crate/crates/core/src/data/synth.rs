//! Synthetic two-structure "ultrasound" images.
//!
//! Every image holds one structure per task on a speckled background, so the
//! prompt alone decides which structure is the target. Task `i` is bright
//! when `i` is even and dark otherwise; its outline is an ellipse when
//! `i % 2 == (i / 2) % 2` and a lobed blob otherwise (task 0: bright
//! ellipse, task 1: dark blob, task 2: bright blob, task 3: dark ellipse).
//!
//! Speckle is multiplicative: `s = (u1 + u2 + u3 + u4) / 2` with `u ~ U[0,1)`
//! (mean 1), applied after compositing and followed by clipping to `[0, 1]`.
//! All draws come from [`crate::rng`] streams.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MIN_AREA_FRACTION: f64 = 0.02;
pub const MAX_AREA_FRACTION: f64 = 0.30;
/// Maximum overlap of two structures, as a fraction of the smaller one.
pub const MAX_OVERLAP_FRACTION: f64 = 0.10;
pub const MIN_SIZE: usize = 32;
const PLACEMENT_ATTEMPTS: usize = 400;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub prompt_text: String,
}

impl TaskSpec {
    pub fn new(task_id: usize, name: impl Into<String>) -> Self {
        let name = name.into();
        let prompt_text = format!("Segment the {name} in the ultrasound image.");
        Self { task_id, name, prompt_text }
    }

    pub fn is_bright(&self) -> bool {
        self.task_id % 2 == 0
    }

    pub fn is_ellipse(&self) -> bool {
        self.task_id % 2 == (self.task_id / 2) % 2
    }
}

/// `n` tasks following the polarity/shape alternation.
pub fn default_tasks(n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| {
            let polarity = if i % 2 == 0 { "bright" } else { "dark" };
            let shape = if i % 2 == (i / 2) % 2 { "ellipse" } else { "blob" };
            if i < 4 {
                TaskSpec::new(i, format!("{polarity}-{shape}"))
            } else {
                TaskSpec::new(i, format!("{polarity}-{shape}-{i}"))
            }
        })
        .collect()
}

pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 tasks, got {}", tasks.len())));
    }
    for (i, a) in tasks.iter().enumerate() {
        if a.prompt_text.trim().is_empty() {
            return Err(Error::Precondition(format!("task {} has an empty prompt", a.task_id)));
        }
        for b in &tasks[i + 1..] {
            if a.task_id == b.task_id {
                return Err(Error::Precondition(format!("duplicate task id {}", a.task_id)));
            }
            if a.prompt_text == b.prompt_text {
                return Err(Error::Precondition(format!("tasks {} and {} share a prompt", a.task_id, b.task_id)));
            }
        }
    }
    Ok(())
}

/// Binary `H x W` mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn overlap(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a != 0 && b != 0).count()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Threshold a probability map at 0.5 (values >= 0.5 are foreground).
    pub fn from_probs(probs: &[f32], height: usize, width: usize) -> Self {
        Self { height, width, data: probs.iter().map(|&p| u8::from(p >= 0.5)).collect() }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| f32::from(v)).collect()
    }
}

/// An image with one ground-truth mask per task. `image` is `[3, H, W]`
/// with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub image: Tensor<f32>,
    pub masks: BTreeMap<usize, Mask>,
    pub provenance_seed: u64,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

enum Outline {
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    Blob { cy: f64, cx: f64, r0: f64, harmonics: Vec<(f64, f64)> },
}

impl Outline {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Outline::Ellipse { cy, cx, a, b, theta } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Outline::Blob { cy, cx, r0, harmonics } => {
                let (dy, dx) = (y - cy, x - cx);
                let phi = dy.atan2(dx);
                let mut r = 1.0;
                for (m, (amp, phase)) in harmonics.iter().enumerate() {
                    r += amp * ((m as f64 + 2.0) * phi + phase).cos();
                }
                (dx * dx + dy * dy).sqrt() <= r0 * r
            }
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> Mask {
        let mut m = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    m.data[y * w + x] = 1;
                }
            }
        }
        m
    }
}

fn draw_outline(r: &mut rng::Rng, ellipse: bool, h: usize, w: usize) -> Outline {
    let hw = (h * w) as f64;
    let area = r.random_range(0.04..0.14) * hw;
    if ellipse {
        let ratio = r.random_range(0.55..1.0);
        let a = (area / (PI * ratio)).sqrt();
        let b = ratio * a;
        let cy = r.random_range(a.min(h as f64 / 2.0)..(h as f64 - a).max(h as f64 / 2.0 + 1e-9));
        let cx = r.random_range(a.min(w as f64 / 2.0)..(w as f64 - a).max(w as f64 / 2.0 + 1e-9));
        Outline::Ellipse { cy, cx, a, b, theta: r.random_range(0.0..PI) }
    } else {
        let harmonics: Vec<(f64, f64)> = (0..3).map(|_| (r.random_range(-0.18..0.18), r.random_range(0.0..2.0 * PI))).collect();
        let gain = 1.0 + harmonics.iter().map(|(a, _)| a * a / 2.0).sum::<f64>();
        let r0 = (area / (PI * gain)).sqrt();
        let reach = r0 * 1.54;
        let cy = r.random_range(reach.min(h as f64 / 2.0)..(h as f64 - reach).max(h as f64 / 2.0 + 1e-9));
        let cx = r.random_range(reach.min(w as f64 / 2.0)..(w as f64 - reach).max(w as f64 / 2.0 + 1e-9));
        Outline::Blob { cy, cx, r0, harmonics }
    }
}

/// Deterministic sample for `(tasks, seed, size)`.
pub fn synth_image(tasks: &[TaskSpec], seed: u64, size: (usize, usize)) -> Result<ImageSample> {
    validate_tasks(tasks)?;
    let (h, w) = size;
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::Precondition(format!("image size {h}x{w} is below {MIN_SIZE}x{MIN_SIZE}")));
    }
    let hw = (h * w) as f64;
    let mut r = rng::stream(seed, "synth");
    let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
    let mut outlines = Vec::new();
    for task in tasks {
        let mut placed = None;
        let mut violated = "";
        for _ in 0..PLACEMENT_ATTEMPTS {
            let outline = draw_outline(&mut r, task.is_ellipse(), h, w);
            let m = outline.rasterize(h, w);
            let area = m.area() as f64;
            if area < MIN_AREA_FRACTION * hw || area > MAX_AREA_FRACTION * hw {
                violated = "structure area within [2%, 30%] of the image";
                continue;
            }
            // structures are kept disjoint, which is stricter than the 10% overlap bound
            if masks.values().any(|o| o.overlap(&m) > 0) {
                violated = "pairwise structure overlap <= 10% of the smaller structure";
                continue;
            }
            placed = Some((outline, m));
            break;
        }
        let (outline, m) = placed.ok_or_else(|| Error::Generation { bound: violated.to_string() })?;
        outlines.push((task.is_bright(), outline));
        masks.insert(task.task_id, m);
    }

    let phase = r.random_range(0.0..2.0 * PI);
    let mut gray = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            gray[y * w + x] = 0.5 - 0.15 * (y as f64 / h as f64) + 0.05 * (2.0 * PI * x as f64 / w as f64 + phase).sin();
        }
    }
    for ((bright, _), task) in outlines.iter().zip(tasks) {
        let level = if *bright { r.random_range(0.82..0.95) } else { r.random_range(0.05..0.12) };
        let m = &masks[&task.task_id];
        for (g, &v) in gray.iter_mut().zip(&m.data) {
            if v != 0 {
                *g = level;
            }
        }
    }
    for g in gray.iter_mut() {
        let s: f64 = (0..4).map(|_| r.random::<f64>()).sum::<f64>() / 2.0;
        *g *= s;
    }
    let bands = r.random_range(0..=2usize);
    for _ in 0..bands {
        let center = r.random_range(0.0..w as f64);
        let half = r.random_range(w as f64 / 32.0..w as f64 / 10.0);
        let depth = r.random_range(0.15..0.3);
        for x in 0..w {
            let d = ((x as f64 + 0.5 - center) / half).abs();
            if d < 1.0 {
                let factor = 1.0 - depth * 0.5 * (1.0 + (PI * d).cos());
                for y in 0..h {
                    gray[y * w + x] *= factor;
                }
            }
        }
    }
    let plane: Vec<f32> = gray.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(ImageSample {
        sample_id: format!("seed-{seed:016x}"),
        image: Tensor::from_vec(&[3, h, w], data),
        masks,
        provenance_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let t = default_tasks(2);
        assert_eq!(synth_image(&t, 9, (64, 64)).unwrap(), synth_image(&t, 9, (64, 64)).unwrap());
        assert_ne!(synth_image(&t, 9, (64, 64)).unwrap().image, synth_image(&t, 10, (64, 64)).unwrap().image);
    }

    #[test]
    fn contract_holds_over_many_seeds() {
        let tasks = default_tasks(2);
        for seed in 0..200u64 {
            let s = synth_image(&tasks, seed, (64, 48)).unwrap();
            let hw = (64 * 48) as f64;
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for m in s.masks.values() {
                assert!(m.data.iter().all(|&v| v <= 1));
                let a = m.area() as f64;
                assert!(a >= 0.02 * hw && a <= 0.30 * hw, "seed {seed}: area {a}");
            }
            let (a, b) = (&s.masks[&0], &s.masks[&1]);
            let smaller = a.area().min(b.area()) as f64;
            assert!(a.overlap(b) as f64 <= 0.1 * smaller);
            // the masks disagree on at least 90% of the smaller structure
            let differ = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count() as f64;
            assert!(differ >= 0.9 * smaller);
        }
    }

    #[test]
    fn polarity_is_visible() {
        let tasks = default_tasks(2);
        for seed in 0..20u64 {
            let s = synth_image(&tasks, seed, (64, 64)).unwrap();
            let plane = &s.image.data()[..64 * 64];
            let mean_in = |m: &Mask| {
                let (sum, n) = plane.iter().zip(&m.data).filter(|(_, &v)| v != 0).fold((0.0, 0), |(s, n), (&p, _)| (s + p, n + 1));
                sum / n as f32
            };
            let union: Vec<bool> = s.masks[&0].data.iter().zip(&s.masks[&1].data).map(|(&a, &b)| a + b > 0).collect();
            let bg: Vec<f32> = plane.iter().zip(&union).filter(|(_, &u)| !u).map(|(&p, _)| p).collect();
            let bg_mean = bg.iter().sum::<f32>() / bg.len() as f32;
            assert!(mean_in(&s.masks[&0]) > bg_mean);
            assert!(mean_in(&s.masks[&1]) < bg_mean);
        }
    }

    #[test]
    fn preconditions() {
        assert!(matches!(synth_image(&default_tasks(1), 0, (64, 64)), Err(Error::Precondition(_))));
        assert!(matches!(synth_image(&default_tasks(2), 0, (16, 64)), Err(Error::Precondition(_))));
    }

    #[test]
    fn task_families_alternate() {
        let t = default_tasks(4);
        let names: Vec<&str> = t.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["bright-ellipse", "dark-blob", "bright-blob", "dark-ellipse"]);
        assert_eq!(t[0].prompt_text, "Segment the bright-ellipse in the ultrasound image.");
    }

    #[test]
    fn four_tasks_fit_at_64() {
        let tasks = default_tasks(4);
        for seed in 0..10 {
            let s = synth_image(&tasks, seed, (64, 64)).unwrap();
            assert_eq!(s.masks.len(), 4);
        }
    }
}
