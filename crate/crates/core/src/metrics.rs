//! Dice, IoU and HD95, with per-task and mean aggregation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::data::{DatasetManifest, ImageSample, Mask};
use crate::error::{Error, Result};
use crate::model::{decode, encode, DecoderKind, ModelParams, PromptInjection};

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!("masks {}x{} and {}x{} differ", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

fn counts(p: &Mask, g: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut np, mut ng) = (0, 0);
    for (&a, &b) in p.data.iter().zip(&g.data) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    (inter, np, ng)
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P ∩ G| / |P ∪ G|`; two empty masks score 1.
pub fn iou_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    let u = p + g - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let fg = |y: usize, x: usize| m.data[y * w + x] != 0;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x)
                && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Nearest-rank 95th percentile of `d` (sorted in place).
fn percentile95(d: &mut [f64]) -> f64 {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    d[rank.max(1) - 1]
}

fn directed95(from: &[(usize, usize)], to_map: &[f64], w: usize) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&(y, x)| to_map[y * w + x].sqrt()).collect();
    percentile95(&mut d)
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries, in
/// pixels. `None` when either mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height, pred.width);
    let to_g = squared_distance_map(h, w, &bg);
    let to_p = squared_distance_map(h, w, &bp);
    Ok(Some(directed95(&bp, &to_g, w).max(directed95(&bg, &to_p, w))))
}

/// Per-task aggregate. Dice and IoU are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub task_name: String,
    pub dice: f64,
    pub iou: f64,
    /// Mean over samples where it is defined.
    pub hd95: Option<f64>,
    pub hd95_excluded: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub mdice: f64,
    pub miou: f64,
}

#[derive(Default)]
struct Acc {
    dice: f64,
    iou: f64,
    hd: f64,
    hd_n: usize,
    excluded: usize,
    n: usize,
}

/// Accumulates `(task, prediction, ground truth)` triples.
pub struct Evaluator {
    tasks: Vec<(usize, String)>,
    acc: Vec<Acc>,
}

impl Evaluator {
    pub fn new(tasks: impl IntoIterator<Item = (usize, String)>) -> Self {
        let tasks: Vec<_> = tasks.into_iter().collect();
        let acc = tasks.iter().map(|_| Acc::default()).collect();
        Self { tasks, acc }
    }

    pub fn add(&mut self, task_id: usize, pred: &Mask, gt: &Mask) -> Result<()> {
        let i = self
            .tasks
            .iter()
            .position(|(t, _)| *t == task_id)
            .ok_or_else(|| Error::Precondition(format!("task {task_id} not registered")))?;
        let a = &mut self.acc[i];
        a.dice += dice_score(pred, gt)?;
        a.iou += iou_score(pred, gt)?;
        match hd95(pred, gt)? {
            Some(d) => {
                a.hd += d;
                a.hd_n += 1;
            }
            None => a.excluded += 1,
        }
        a.n += 1;
        Ok(())
    }

    /// Tasks without samples are left out of the means.
    pub fn finish(self) -> EvalReport {
        let tasks: Vec<TaskReport> = self
            .tasks
            .into_iter()
            .zip(self.acc)
            .filter(|(_, a)| a.n > 0)
            .map(|((task_id, task_name), a)| TaskReport {
                task_id,
                task_name,
                dice: 100.0 * a.dice / a.n as f64,
                iou: 100.0 * a.iou / a.n as f64,
                hd95: (a.hd_n > 0).then(|| a.hd / a.hd_n as f64),
                hd95_excluded: a.excluded,
                n_samples: a.n,
            })
            .collect();
        let k = tasks.len().max(1) as f64;
        let mdice = tasks.iter().map(|t| t.dice).sum::<f64>() / k;
        let miou = tasks.iter().map(|t| t.iou).sum::<f64>() / k;
        EvalReport { tasks, mdice, miou }
    }
}

/// Scores `which` on every (sample, task) pair of `samples`, thresholding
/// probabilities at 0.5.
pub fn evaluate_samples(
    model: &ModelParams<f32>,
    manifest: &DatasetManifest,
    samples: &[ImageSample],
    prompt_enabled: bool,
    which: DecoderKind,
) -> Result<EvalReport> {
    let mut ev = Evaluator::new(manifest.tasks.iter().map(|t| (t.task_id, t.name.clone())));
    let mode = PromptInjection::from_flag(prompt_enabled);
    let prompts: Vec<_> = manifest.tasks.iter().map(|t| model.encode_prompt(&t.prompt_text)).collect::<Result<_>>()?;
    for s in samples {
        let feats = encode(model, &s.image)?;
        for (&task, gt) in &s.masks {
            let k = manifest.tasks.iter().position(|t| t.task_id == task).expect("validated manifest");
            let logits = decode(model, &feats, &prompts[k], which, mode)?;
            let probs: Vec<f32> = logits.data().iter().map(|&z| sigmoid(z)).collect();
            ev.add(task, &Mask::from_probs(&probs, gt.height, gt.width), gt)?;
        }
    }
    Ok(ev.finish())
}

/// Loads `ids` from `manifest` and scores them with the supervised decoder.
pub fn evaluate(model: &ModelParams<f32>, manifest: &DatasetManifest, ids: &[String], prompt_enabled: bool) -> Result<EvalReport> {
    let samples = ids.iter().map(|id| manifest.load_sample(id)).collect::<Result<Vec<_>>>()?;
    evaluate_samples(model, manifest, &samples, prompt_enabled, DecoderKind::Sd)
}

impl EvalReport {
    pub fn task_dice(&self, task_id: usize) -> Option<f64> {
        self.tasks.iter().find(|t| t.task_id == task_id).map(|t| t.dice)
    }

    /// One row per task plus a `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let e = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["task_id", "task", "dice", "iou", "hd95", "hd95_excluded", "n_samples"]).map_err(e)?;
        for t in &self.tasks {
            w.write_record([
                t.task_id.to_string(),
                t.task_name.clone(),
                format!("{:.6}", t.dice),
                format!("{:.6}", t.iou),
                t.hd95.map(|d| format!("{d:.6}")).unwrap_or_default(),
                t.hd95_excluded.to_string(),
                t.n_samples.to_string(),
            ])
            .map_err(e)?;
        }
        let n: usize = self.tasks.iter().map(|t| t.n_samples).sum();
        w.write_record(["", "mean", &format!("{:.6}", self.mdice), &format!("{:.6}", self.miou), "", "", &n.to_string()])
            .map_err(e)?;
        w.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<4} {:<18} {:>8} {:>8} {:>8} {:>6}\n", "id", "task", "Dice%", "IoU%", "HD95", "n");
        for t in &self.tasks {
            let hd = t.hd95.map(|d| format!("{d:.2}")).unwrap_or_else(|| "-".into());
            s += &format!("{:<4} {:<18} {:>8.2} {:>8.2} {:>8} {:>6}\n", t.task_id, t.task_name, t.dice, t.iou, hd, t.n_samples);
        }
        s += &format!("{:<4} {:<18} {:>8.2} {:>8.2}\n", "", "mean", self.mdice, self.miou);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(y, x) in on {
            m.data[y * w + x] = 1;
        }
        m
    }

    fn random_mask(r: &mut impl Rng, n: usize, p: f64) -> Mask {
        Mask { height: n, width: n, data: (0..n * n).map(|_| u8::from(r.random::<f64>() < p)).collect() }
    }

    fn set(m: &Mask) -> HashSet<usize> {
        (0..m.data.len()).filter(|&i| m.data[i] != 0).collect()
    }

    fn brute_hd95(a: &Mask, b: &Mask) -> Option<f64> {
        let ba = boundary(a);
        let bb = boundary(b);
        if ba.is_empty() || bb.is_empty() {
            return None;
        }
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            let mut d: Vec<f64> = from
                .iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(v, u)| ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (0.95 * d.len() as f64).ceil() as usize;
            d[k - 1]
        };
        Some(directed(&ba, &bb).max(directed(&bb, &ba)))
    }

    #[test]
    fn counting_examples() {
        let p = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let g = mask(4, 4, &[(0, 0), (0, 1)]);
        assert!((dice_score(&p, &g).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou_score(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
        let d = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(&p, &d).unwrap(), 0.0);
        let e = Mask::zeros(4, 4);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(iou_score(&e, &e).unwrap(), 1.0);
        assert!(dice_score(&e, &Mask::zeros(3, 4)).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = mask(8, 8, &[(2, 1)]);
        let b = mask(8, 8, &[(2, 6)]);
        assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &Mask::zeros(8, 8)).unwrap(), None);
    }

    #[test]
    fn boundary_of_a_filled_square() {
        let on: Vec<_> = (1..5).flat_map(|y| (1..5).map(move |x| (y, x))).collect();
        let b = boundary(&mask(6, 6, &on));
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&(2, 2)));
        let full = Mask { height: 3, width: 3, data: vec![1; 9] };
        assert_eq!(boundary(&full).len(), 8);
    }

    #[test]
    fn random_pairs_match_oracles() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for i in 0..100 {
            let p = 0.1 + 0.8 * (i as f64 / 100.0);
            let a = random_mask(&mut r, 16, p);
            let b = random_mask(&mut r, 16, 1.0 - p);
            let (sa, sb) = (set(&a), set(&b));
            let inter = sa.intersection(&sb).count();
            let union = sa.union(&sb).count();
            let d = dice_score(&a, &b).unwrap();
            let j = iou_score(&a, &b).unwrap();
            assert_eq!(d, 2.0 * inter as f64 / (sa.len() + sb.len()) as f64);
            assert_eq!(j, inter as f64 / union as f64);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            let (h, o) = (hd95(&a, &b).unwrap(), brute_hd95(&a, &b));
            assert_eq!(h.is_some(), o.is_some());
            if let (Some(h), Some(o)) = (h, o) {
                assert!((h - o).abs() < 1e-9, "{h} vs {o}");
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>(), p in 0.02f64..0.6, q in 0.02f64..0.6) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut r, 12, p);
            let b = random_mask(&mut r, 12, q);
            prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
            prop_assert_eq!(iou_score(&a, &b).unwrap(), iou_score(&b, &a).unwrap());
            prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            let j = iou_score(&a, &b).unwrap();
            let d = dice_score(&a, &b).unwrap();
            prop_assert!(j <= d && d <= 1.0);
            prop_assert_eq!(hd95(&a, &b).unwrap(), brute_hd95(&a, &b));
        }
    }

    #[test]
    fn aggregation_is_per_task_then_mean() {
        let mut ev = Evaluator::new([(0, "a".to_string()), (1, "b".to_string())]);
        let full = Mask { height: 2, width: 2, data: vec![1; 4] };
        let half = Mask { height: 2, width: 2, data: vec![1, 1, 0, 0] };
        let quarter = Mask { height: 2, width: 2, data: vec![1, 0, 0, 0] };
        ev.add(0, &full, &full).unwrap();
        ev.add(1, &half, &full).unwrap(); // dice 2/3
        ev.add(1, &quarter, &full).unwrap(); // dice 2/5
        let r = ev.finish();
        let t1 = 100.0 * (2.0 / 3.0 + 2.0 / 5.0) / 2.0;
        assert!((r.task_dice(1).unwrap() - t1).abs() < 1e-12);
        assert!((r.mdice - (100.0 + t1) / 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(r.to_table().contains("mean"));
    }
}
