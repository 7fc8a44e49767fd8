//! One optimisation step over a labeled and an unlabeled mini-batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph};
use crate::error::{Error, Result};
use crate::model::{decode, DecoderKind, ModelParams, MultiScaleFeatures, PromptFeatures, PromptInjection};
use crate::params::ParamId;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::uplc::pseudo_labels_from_features;

use super::config::TrainConfig;
use super::schedule::{poly_lr, Sgd};

/// Image `[3, H, W]` with a binary target for one task.
pub struct LabeledItem<'a> {
    pub image: Tensor<f32>,
    pub target: Vec<f32>,
    pub prompt: &'a PromptFeatures,
}

pub struct UnlabeledItem<'a> {
    pub image: Tensor<f32>,
    pub prompt: &'a PromptFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Iteration index the step ran at (before increment).
    pub iter: u64,
    pub lr: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    /// Pixels whose calibrated pseudo-label broke its bounds.
    pub uplc_violations: usize,
}

pub struct TrainState {
    pub model: ModelParams<f32>,
    pub opt: Sgd<f32>,
    pub iter: u64,
    pub max_iter: u64,
}

impl TrainState {
    pub fn new(model: ModelParams<f32>, cfg: &TrainConfig, max_iter: u64) -> Self {
        let opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
        Self { model, opt, iter: 0, max_iter }
    }
}

/// Gradient sums and loss components of one step, before the update.
pub struct StepGrads {
    pub grads: HashMap<ParamId, Tensor<f32>>,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub uplc_violations: usize,
}

fn accumulate(into: &mut HashMap<ParamId, Tensor<f32>>, from: HashMap<ParamId, Tensor<f32>>) {
    for (id, g) in from {
        match into.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(id, g);
            }
        }
    }
}

/// Gradients of the supervised loss on the supervised decoder, averaged
/// over the batch.
pub fn supervised_grads(model: &ModelParams<f32>, batch: &[LabeledItem<'_>], cfg: &TrainConfig) -> Result<StepGrads> {
    let mode = PromptInjection::from_flag(cfg.prompt_enabled);
    let (wb, wd) = (cfg.loss_mix.0 as f32, cfg.loss_mix.1 as f32);
    let mut out = StepGrads { grads: HashMap::new(), l_sup: 0.0, l_unsup: 0.0, uplc_violations: 0 };
    let scale = 1.0 / batch.len().max(1) as f32;
    for item in batch {
        let mut g = Graph::new(&model.params);
        let x = g.constant(item.image.clone());
        let feats = model.net.encode_graph(&mut g, x)?;
        let y = model.net.decode_graph(&mut g, &feats, &item.prompt.t, DecoderKind::Sd, mode)?;
        let p = g.sigmoid(y);
        let l = g.seg_loss(p, &item.target, wb, wd);
        out.l_sup += f64::from(g.value(l).data()[0]) / batch.len() as f64;
        accumulate(&mut out.grads, g.backward_scaled(l, scale).into_params());
    }
    Ok(out)
}

/// Pseudo-label target for `feats`, computed without any gradient path.
pub fn pseudo_target(
    model: &ModelParams<f32>,
    feats: &MultiScaleFeatures<f32>,
    prompt: &PromptFeatures,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Vec<f32>, usize)> {
    let mode = PromptInjection::from_flag(cfg.prompt_enabled);
    let (mut target, violations) = if cfg.uplc_enabled {
        let t = pseudo_labels_from_features(model, feats, prompt, mode, &cfg.uplc, rng)?;
        let v = t.invariant_violations();
        (t.y_hat.into_data(), v)
    } else {
        let logits = decode(model, feats, prompt, DecoderKind::Sd, mode)?;
        (logits.data().iter().map(|&z| sigmoid(z)).collect(), 0)
    };
    if let Some(th) = cfg.pseudo_threshold {
        let th = th as f32;
        target.iter_mut().for_each(|v| *v = if *v >= th { 1.0 } else { 0.0 });
    }
    Ok((target, violations))
}

/// Gradients of `lambda_u` times the pseudo-supervised loss on the second
/// decoder, averaged over the batch.
pub fn unsupervised_grads(
    model: &ModelParams<f32>,
    batch: &[UnlabeledItem<'_>],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepGrads> {
    let mode = PromptInjection::from_flag(cfg.prompt_enabled);
    let (wb, wd) = (cfg.loss_mix.0 as f32, cfg.loss_mix.1 as f32);
    let mut out = StepGrads { grads: HashMap::new(), l_sup: 0.0, l_unsup: 0.0, uplc_violations: 0 };
    let scale = cfg.lambda_u as f32 / batch.len().max(1) as f32;
    for item in batch {
        let mut g = Graph::new(&model.params);
        let x = g.constant(item.image.clone());
        let fv = model.net.encode_graph(&mut g, x)?;
        let feats = MultiScaleFeatures { levels: fv.map(|v| g.value(v).clone()) };
        let (target, violations) = pseudo_target(model, &feats, item.prompt, cfg, rng)?;
        out.uplc_violations += violations;
        let y = model.net.decode_graph(&mut g, &fv, &item.prompt.t, DecoderKind::Pd, mode)?;
        let p = g.sigmoid(y);
        let l = g.seg_loss(p, &target, wb, wd);
        out.l_unsup += f64::from(g.value(l).data()[0]) / batch.len() as f64;
        if scale != 0.0 {
            accumulate(&mut out.grads, g.backward_scaled(l, scale).into_params());
        }
    }
    Ok(out)
}

/// Total loss `L_sup + lambda_u L_unsup`, one SGD update at `poly_lr(iter)`,
/// then `iter += 1`. Parameters are untouched if a loss is not finite.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[LabeledItem<'_>],
    unlabeled: &[UnlabeledItem<'_>],
    cfg: &TrainConfig,
    perturb_rng: &mut Rng,
) -> Result<StepRecord> {
    if labeled.is_empty() {
        return Err(Error::Precondition("labeled batch is empty".into()));
    }
    let lr = poly_lr(state.iter, state.max_iter, cfg.init_lr, cfg.power)?;
    let mut sup = supervised_grads(&state.model, labeled, cfg)?;
    let unsup = if unlabeled.is_empty() {
        None
    } else {
        Some(unsupervised_grads(&state.model, unlabeled, cfg, perturb_rng)?)
    };
    let (l_unsup, violations) = unsup.as_ref().map_or((0.0, 0), |u| (u.l_unsup, u.uplc_violations));
    let finite = sup.l_sup.is_finite()
        && l_unsup.is_finite()
        && sup.grads.values().chain(unsup.iter().flat_map(|u| u.grads.values())).all(Tensor::all_finite);
    if !finite {
        return Err(Error::NonFinite { iter: state.iter, lr, l_sup: sup.l_sup, l_unsup });
    }
    if let Some(u) = unsup {
        accumulate(&mut sup.grads, u.grads);
    }
    state.opt.step(&mut state.model.params, &sup.grads, lr);
    let record = StepRecord { iter: state.iter, lr, l_sup: sup.l_sup, l_unsup, uplc_violations: violations };
    state.iter += 1;
    Ok(record)
}
