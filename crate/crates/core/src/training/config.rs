use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::uplc::UplcConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialisation.
    pub model: u64,
    /// Shuffling, task draws and augmentation.
    pub data: u64,
    /// Feature perturbations for pseudo-labels.
    pub perturb: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 0, data: 0, perturb: 0 }
    }
}

/// Every knob of a training run. Serialised verbatim into run records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled images per step; the unlabeled batch has the same size.
    pub batch_size: usize,
    pub epochs: usize,
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub image_size: (usize, usize),
    pub uplc: UplcConfig,
    pub lambda_u: f64,
    /// `(w_bce, w_dice)`.
    pub loss_mix: (f64, f64),
    pub seeds: Seeds,
    pub prompt_enabled: bool,
    /// Calibrated pseudo-labels when set; otherwise the plain detached
    /// supervised-decoder output is the target.
    pub uplc_enabled: bool,
    /// Train on unlabeled images at all. Off gives the labeled-only baseline.
    pub use_unlabeled: bool,
    /// Binarise pseudo-labels at this confidence instead of using soft targets.
    pub pseudo_threshold: Option<f64>,
    pub augment: bool,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 60,
            init_lr: 0.05,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-5,
            image_size: (64, 64),
            uplc: UplcConfig::default(),
            lambda_u: 1.0,
            loss_mix: (1.0, 1.0),
            seeds: Seeds::default(),
            prompt_enabled: true,
            uplc_enabled: true,
            use_unlabeled: true,
            pseudo_threshold: None,
            augment: true,
            eval_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings used at full scale: batch 16, lr 1e-3, 200 epochs, 224 px.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 16,
            epochs: 200,
            init_lr: 0.001,
            image_size: (224, 224),
            model: ModelConfig::convnext_tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive".into());
        }
        if !(self.init_lr > 0.0 && self.power > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("init_lr and power must be positive, momentum and weight_decay non-negative".into());
        }
        if !(self.lambda_u >= 0.0 && self.loss_mix.0 >= 0.0 && self.loss_mix.1 >= 0.0) {
            return bad("lambda_u and loss weights must be non-negative".into());
        }
        if let Some(t) = self.pseudo_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("pseudo_threshold {t} outside [0, 1]"));
            }
        }
        self.model.validate()?;
        self.model.check_input(self.image_size.0, self.image_size.1)?;
        if self.uplc_enabled && self.use_unlabeled {
            self.uplc.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig { epochs: 3, lambda_u: 0.5, ..Default::default() };
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 7\n[uplc]\nn = 3\nkind = \"gaussian\"\nrate = 0.1\n").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.uplc.n, 3);
        assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
        assert!(TrainConfig::from_toml("epoch = 7").is_err());
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        for c in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda_u: -1.0, ..Default::default() },
            TrainConfig { image_size: (60, 64), ..Default::default() },
            TrainConfig { uplc: UplcConfig { n: 1, ..Default::default() }, ..Default::default() },
            TrainConfig { pseudo_threshold: Some(2.0), ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
