//! The epoch loop: batching, task draws, augmentation, evaluation, history
//! and checkpoints.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageSample, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_samples, EvalReport};
use crate::model::{checkpoint, DecoderKind, ModelParams, PromptFeatures};
use crate::rng::{self, Rng};

use super::augment;
use super::config::TrainConfig;
use super::schedule::poly_lr;
use super::step::{train_step, LabeledItem, StepRecord, TrainState, UnlabeledItem};

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: u64,
    /// `poly_lr(iter)`.
    pub lr: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub uplc_violations: usize,
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// `(epoch, mDice)` of the best evaluated epoch.
    pub best: Option<(usize, f64)>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.history.last().and_then(|r| r.eval.as_ref())
    }
}

/// In-memory training material.
pub struct TrainData<'m> {
    pub manifest: &'m DatasetManifest,
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl<'m> TrainData<'m> {
    pub fn load(manifest: &'m DatasetManifest, split: &SplitManifest) -> Result<Self> {
        let load = |ids: &[String]| ids.iter().map(|id| manifest.load_sample(id)).collect::<Result<Vec<_>>>();
        Ok(Self {
            manifest,
            labeled: load(&split.labeled_ids)?,
            unlabeled: load(&split.unlabeled_ids)?,
            test: load(&split.test_ids)?,
        })
    }
}

fn history_header(manifest: &DatasetManifest) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "iter", "lr", "l_sup", "l_unsup", "uplc_violations"].map(String::from).to_vec();
    for t in &manifest.tasks {
        h.push(format!("dice_{}", t.task_id));
        h.push(format!("iou_{}", t.task_id));
    }
    h.extend(["mdice".to_string(), "miou".to_string()]);
    h
}

fn history_row(manifest: &DatasetManifest, r: &EpochRecord) -> Vec<String> {
    let mut row = vec![
        r.epoch.to_string(),
        r.iter.to_string(),
        r.lr.to_string(),
        r.l_sup.to_string(),
        r.l_unsup.to_string(),
        r.uplc_violations.to_string(),
    ];
    for t in &manifest.tasks {
        let tr = r.eval.as_ref().and_then(|e| e.tasks.iter().find(|x| x.task_id == t.task_id));
        row.push(tr.map(|x| x.dice.to_string()).unwrap_or_default());
        row.push(tr.map(|x| x.iou.to_string()).unwrap_or_default());
    }
    row.push(r.eval.as_ref().map(|e| e.mdice.to_string()).unwrap_or_default());
    row.push(r.eval.as_ref().map(|e| e.miou.to_string()).unwrap_or_default());
    row
}

struct History {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl History {
    fn create(path: PathBuf, manifest: &DatasetManifest) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut h = Self { writer: csv::Writer::from_writer(f), path };
        h.write(history_header(manifest))?;
        Ok(h)
    }

    fn write(&mut self, row: Vec<String>) -> Result<()> {
        self.writer.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize, iter: u64, eval: Option<&EvalReport>) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "iter": iter,
        "mdice": eval.map(|e| e.mdice),
        "train_config": cfg,
    })
}

/// Cycles through `len` indices, reshuffling at every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), pos: len }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn pick_task(sample: &ImageSample, rng: &mut Rng) -> usize {
    let tasks: Vec<usize> = sample.masks.keys().copied().collect();
    tasks[rng.random_range(0..tasks.len())]
}

/// Trains from scratch. With `out_dir`, writes the history file after every
/// epoch, `best.ckpt` whenever test mDice improves and `final.ckpt` at the end.
pub fn train(cfg: &TrainConfig, data: &TrainData<'_>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = data.manifest;
    if manifest.image_size != cfg.image_size {
        return Err(Error::Config(format!("dataset is {:?}, config expects {:?}", manifest.image_size, cfg.image_size)));
    }
    if data.labeled.is_empty() {
        return Err(Error::Precondition("no labeled samples".into()));
    }
    let model = ModelParams::<f32>::init(&cfg.model, cfg.seeds.model)?;
    let prompts: Vec<(usize, PromptFeatures)> = manifest
        .tasks
        .iter()
        .map(|t| Ok((t.task_id, model.encode_prompt(&t.prompt_text)?)))
        .collect::<Result<_>>()?;
    let prompt_of = |task: usize| &prompts.iter().find(|(t, _)| *t == task).expect("manifest task").1;

    let b = cfg.batch_size;
    let iters_per_epoch = data.labeled.len().div_ceil(b) as u64;
    let max_iter = iters_per_epoch * cfg.epochs as u64;
    let mut state = TrainState::new(model, cfg, max_iter);
    let mut data_rng = rng::stream(cfg.seeds.data, "train.data");
    let mut perturb_rng = rng::stream(cfg.seeds.perturb, "train.perturb");
    let unlabeled: &[ImageSample] = if cfg.use_unlabeled { &data.unlabeled } else { &[] };
    let mut cycler = Cycler::new(unlabeled.len());

    let mut history_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(History::create(d.join(HISTORY_FILE), manifest)?)
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(max_iter as usize);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.labeled.len()).collect();
        order.shuffle(&mut data_rng);
        let (mut sum_sup, mut sum_unsup, mut violations) = (0.0, 0.0, 0);
        for chunk in order.chunks(b) {
            let mut lab = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &data.labeled[i];
                let task = pick_task(s, &mut data_rng);
                let (image, mask) = if cfg.augment {
                    augment::augment(&s.image, &s.masks[&task], &mut data_rng)
                } else {
                    (s.image.clone(), s.masks[&task].clone())
                };
                lab.push(LabeledItem { image, target: mask.to_f32(), prompt: prompt_of(task) });
            }
            let mut unl = Vec::with_capacity(chunk.len());
            if !unlabeled.is_empty() {
                for _ in 0..chunk.len() {
                    let s = &unlabeled[cycler.next(&mut data_rng)];
                    let task = pick_task(s, &mut data_rng);
                    let image = if cfg.augment {
                        augment::apply(&s.image, None, augment::Affine::draw(&mut data_rng)).0
                    } else {
                        s.image.clone()
                    };
                    unl.push(UnlabeledItem { image, prompt: prompt_of(task) });
                }
            }
            let rec = train_step(&mut state, &lab, &unl, cfg, &mut perturb_rng)?;
            sum_sup += rec.l_sup;
            sum_unsup += rec.l_unsup;
            violations += rec.uplc_violations;
            steps.push(rec);
        }
        let last = epoch + 1 == cfg.epochs;
        let eval = if !data.test.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            Some(evaluate_samples(&state.model, manifest, &data.test, cfg.prompt_enabled, DecoderKind::Sd)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            iter: state.iter,
            lr: poly_lr(state.iter, max_iter, cfg.init_lr, cfg.power)?,
            l_sup: sum_sup / iters_per_epoch as f64,
            l_unsup: sum_unsup / iters_per_epoch as f64,
            uplc_violations: violations,
            eval,
        };
        if let Some(h) = history_file.as_mut() {
            h.write(history_row(manifest, &record))?;
        }
        if let Some(e) = &record.eval {
            if best.is_none_or(|(_, m)| e.mdice > m) {
                best = Some((epoch, e.mdice));
                if let Some(d) = out_dir {
                    let meta = checkpoint_meta(cfg, epoch, state.iter, Some(e));
                    checkpoint::save(&d.join(BEST_CHECKPOINT), &state.model, &meta)?;
                }
            }
        }
        history.push(record);
    }
    if let Some(d) = out_dir {
        let last = history.last().expect("at least one epoch");
        let meta = checkpoint_meta(cfg, last.epoch, state.iter, last.eval.as_ref());
        checkpoint::save(&d.join(FINAL_CHECKPOINT), &state.model, &meta)?;
    }
    Ok(TrainOutcome { model: state.model, history, steps, best })
}
