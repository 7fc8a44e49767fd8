//! Pseudo-label calibration from a perturbed-feature ensemble.
//!
//! The deepest encoder feature `v4` is perturbed `N` times, each copy is
//! decoded by the supervised decoder, and the resulting probability maps
//! are reduced to a mean `mu`, a population variance `gamma` and the damped
//! target `y_hat = exp(-gamma) * mu`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::model::{decode, encode, DecoderKind, ModelParams, MultiScaleFeatures, PromptFeatures, PromptInjection};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Dropout,
    Gaussian,
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(Self::Dropout),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown perturbation kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dropout => "dropout",
            Self::Gaussian => "gaussian",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UplcConfig {
    pub n: usize,
    pub kind: PerturbKind,
    pub rate: f64,
}

impl Default for UplcConfig {
    fn default() -> Self {
        Self { n: 2, kind: PerturbKind::Dropout, rate: 0.3 }
    }
}

impl UplcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Calibration(format!("need at least 2 passes for a variance, got {}", self.n)));
        }
        check_rate(self.kind, self.rate)
    }
}

fn check_rate(kind: PerturbKind, rate: f64) -> Result<()> {
    let ok = match kind {
        PerturbKind::Dropout => (0.0..1.0).contains(&rate),
        PerturbKind::Gaussian => rate >= 0.0 && rate.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{kind} rate {rate} out of range")))
    }
}

/// Dropout zeroes each element with probability `rate` and scales survivors
/// by `1 / (1 - rate)`. Gaussian adds noise with deviation `rate * std(v4)`.
pub fn perturb_feature<T: Real>(v4: &Tensor<T>, kind: PerturbKind, rate: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    check_rate(kind, rate)?;
    if rate == 0.0 {
        return Ok(v4.clone());
    }
    let mut out = v4.clone();
    match kind {
        PerturbKind::Dropout => {
            let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
            for x in out.data_mut() {
                *x = if rng.random::<f64>() < rate { T::zero() } else { *x * keep };
            }
        }
        PerturbKind::Gaussian => {
            let n = v4.len() as f64;
            let mean = v4.data().iter().map(|x| x.as_f64()).sum::<f64>() / n;
            let var = v4.data().iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let sigma = rate * var.sqrt();
            for x in out.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *x += T::from_f64_lossy(sigma * e);
            }
        }
    }
    Ok(out)
}

/// Ensemble statistics for one image, all `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelTriple<T> {
    pub mu: Tensor<T>,
    pub gamma: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub n_passes: usize,
    pub perturb_kind: PerturbKind,
    pub perturb_rate: f64,
}

impl<T: Real> PseudoLabelTriple<T> {
    /// Number of pixels breaking `0 <= y_hat <= mu <= 1` or `0 <= gamma <= 1/4`.
    pub fn invariant_violations(&self) -> usize {
        let quarter = T::from_f64_lossy(0.25);
        self.mu
            .data()
            .iter()
            .zip(self.gamma.data())
            .zip(self.y_hat.data())
            .filter(|((&m, &g), &y)| {
                !(T::zero() <= y && y <= m && m <= T::one() && T::zero() <= g && g <= quarter)
            })
            .count()
    }

    pub fn check_invariants(&self) -> Result<()> {
        match self.invariant_violations() {
            0 => Ok(()),
            n => Err(Error::Calibration(format!("{n} pixels violate the pseudo-label bounds"))),
        }
    }
}

/// Mean, population variance and damped mean of `N >= 2` probability maps.
///
/// Per-pixel values are sorted before reduction so the result does not
/// depend on mask order, and all-equal pixels return their value unchanged.
pub fn calibrate<T: Real>(masks: &[Tensor<T>]) -> Result<PseudoLabelTriple<T>> {
    let n = masks.len();
    if n < 2 {
        return Err(Error::Calibration(format!("variance is undefined for {n} mask(s)")));
    }
    let shape = masks[0].shape().to_vec();
    if let Some(m) = masks.iter().find(|m| m.shape() != shape.as_slice()) {
        return Err(Error::Shape(format!("mask shapes {shape:?} and {:?} differ", m.shape())));
    }
    let len = masks[0].len();
    let nt = T::from_usize(n).unwrap();
    let quarter = T::from_f64_lossy(0.25);
    let mut mu = vec![T::zero(); len];
    let mut gamma = vec![T::zero(); len];
    let mut y_hat = vec![T::zero(); len];
    let mut vals = vec![T::zero(); n];
    for i in 0..len {
        for (v, m) in vals.iter_mut().zip(masks) {
            *v = m.data()[i];
        }
        if vals.iter().any(|&v| !(T::zero() <= v && v <= T::one())) {
            return Err(Error::Calibration(format!("probability outside [0, 1] at pixel {i}")));
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (m, g) = if vals[0] == vals[n - 1] {
            (vals[0], T::zero())
        } else {
            let m = vals.iter().copied().sum::<T>() / nt;
            let g = vals.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / nt;
            (m, g.min(quarter))
        };
        mu[i] = m;
        gamma[i] = g;
        y_hat[i] = (-g).exp() * m;
    }
    Ok(PseudoLabelTriple {
        mu: Tensor::from_vec(&shape, mu),
        gamma: Tensor::from_vec(&shape, gamma),
        y_hat: Tensor::from_vec(&shape, y_hat),
        n_passes: n,
        perturb_kind: PerturbKind::Dropout,
        perturb_rate: 0.0,
    })
}

/// Pseudo-labels from already computed encoder features. Pass `i` draws from
/// its own stream forked off a seed taken from `rng`.
pub fn pseudo_labels_from_features<T: Real>(
    model: &ModelParams<T>,
    feats: &MultiScaleFeatures<T>,
    prompt: &PromptFeatures,
    mode: PromptInjection,
    cfg: &UplcConfig,
    rng: &mut Rng,
) -> Result<PseudoLabelTriple<T>> {
    cfg.validate()?;
    let base: u64 = rng.random();
    let mut masks = Vec::with_capacity(cfg.n);
    for pass in 0..cfg.n {
        let mut pass_rng = rng::rng_from(rng::fork(base, pass as u64));
        let mut perturbed = feats.clone();
        perturbed.levels[3] = perturb_feature(&feats.levels[3], cfg.kind, cfg.rate, &mut pass_rng)?;
        let logits = decode(model, &perturbed, prompt, DecoderKind::Sd, mode)?;
        masks.push(logits.map(sigmoid));
    }
    let mut triple = calibrate(&masks)?;
    triple.perturb_kind = cfg.kind;
    triple.perturb_rate = cfg.rate;
    Ok(triple)
}

/// Encodes `image` once, then builds the calibrated pseudo-label for
/// `prompt_text`. Nothing here is differentiable.
pub fn generate_pseudo_labels<T: Real>(
    model: &ModelParams<T>,
    image: &Tensor<T>,
    prompt_text: &str,
    prompt_enabled: bool,
    cfg: &UplcConfig,
    rng: &mut Rng,
) -> Result<PseudoLabelTriple<T>> {
    cfg.validate()?;
    let feats = encode(model, image)?;
    let prompt = model.encode_prompt(prompt_text)?;
    pseudo_labels_from_features(model, &feats, &prompt, PromptInjection::from_flag(prompt_enabled), cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn px(vals: &[f64]) -> Vec<Tensor<f64>> {
        vals.iter().map(|&v| Tensor::from_vec(&[1, 1], vec![v])).collect()
    }

    #[test]
    fn hand_values() {
        let t = calibrate(&px(&[1.0, 0.0])).unwrap();
        assert_eq!(t.mu.data()[0], 0.5);
        assert_eq!(t.gamma.data()[0], 0.25);
        assert!((t.y_hat.data()[0] - 0.5 * (-0.25f64).exp()).abs() < 1e-12);
        assert!((t.y_hat.data()[0] - 0.389_400_391_535_702_44).abs() < 1e-12);
        let t = calibrate(&px(&[0.8, 0.6])).unwrap();
        assert!((t.mu.data()[0] - 0.7).abs() < 1e-12);
        assert!((t.gamma.data()[0] - 0.01).abs() < 1e-12);
        assert!((t.y_hat.data()[0] - 0.693_034_883_624_417_7).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        assert!(matches!(calibrate(&px(&[0.3])), Err(Error::Calibration(_))));
        let bad = vec![Tensor::<f64>::zeros(&[2, 2]), Tensor::zeros(&[2, 3])];
        assert!(matches!(calibrate(&bad), Err(Error::Shape(_))));
        assert!(calibrate(&px(&[0.3, 1.5])).is_err());
        let v = Tensor::<f64>::zeros(&[4]);
        let mut r = rng::rng_from(0);
        assert!(perturb_feature(&v, PerturbKind::Dropout, 1.0, &mut r).is_err());
        assert!(perturb_feature(&v, PerturbKind::Dropout, -0.1, &mut r).is_err());
        assert!(perturb_feature(&v, PerturbKind::Gaussian, -1.0, &mut r).is_err());
        assert!(UplcConfig { n: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn dropout_statistics() {
        let v = Tensor::<f64>::full(&[200_000], 2.0);
        let mut r = rng::rng_from(9);
        let out = perturb_feature(&v, PerturbKind::Dropout, 0.3, &mut r).unwrap();
        let zeros = out.data().iter().filter(|&&x| x == 0.0).count() as f64 / 200_000.0;
        assert!((zeros - 0.3).abs() < 0.02, "{zeros}");
        let scale = 2.0 / 0.7;
        assert!(out.data().iter().all(|&x| x == 0.0 || (x - scale).abs() < 1e-12));
        assert_eq!(perturb_feature(&v, PerturbKind::Dropout, 0.0, &mut r).unwrap(), v);
    }

    #[test]
    fn perturbation_preserves_expectation() {
        let mut r = rng::rng_from(4);
        let v = Tensor::from_vec(&[64], (0..64).map(|i| (i as f64 * 0.37).sin() + 0.5).collect());
        for kind in [PerturbKind::Dropout, PerturbKind::Gaussian] {
            let mut acc = vec![0.0; 64];
            for _ in 0..1000 {
                let p = perturb_feature(&v, kind, 0.3, &mut r).unwrap();
                for (a, x) in acc.iter_mut().zip(p.data()) {
                    *a += x / 1000.0;
                }
            }
            // per-element std of one draw is at most ~0.66 * |v| <= 1, so 5 sigma / sqrt(1000)
            for (a, x) in acc.iter().zip(v.data()) {
                assert!((a - x).abs() < 0.16, "{kind}: {a} vs {x}");
            }
        }
    }

    #[test]
    fn damping_is_strictly_decreasing_in_variance() {
        for mi in 1..=20 {
            let m = mi as f64 / 20.0;
            let mut prev = f64::INFINITY;
            for gi in 0..=50 {
                let g = gi as f64 * 0.005;
                let y = (-g).exp() * m;
                assert!(y < prev);
                prev = y;
            }
        }
    }

    fn oracle(masks: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = masks.len() as f64;
        let len = masks[0].len();
        let (mut mu, mut ga, mut yh) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for i in 0..len {
            let mut s = 0.0;
            for m in masks {
                s += m[i];
            }
            let m = s / n;
            let mut v = 0.0;
            for mk in masks {
                v += (mk[i] - m) * (mk[i] - m);
            }
            mu[i] = m;
            ga[i] = v / n;
            yh[i] = (-ga[i]).exp() * m;
        }
        (mu, ga, yh)
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let n = 2 + trial % 3;
            let raw: Vec<Vec<f64>> = (0..n).map(|_| (0..64).map(|_| r.random::<f64>()).collect()).collect();
            let t = calibrate(&raw.iter().map(|v| Tensor::from_vec(&[8, 8], v.clone())).collect::<Vec<_>>()).unwrap();
            let (mu, ga, yh) = oracle(&raw);
            for i in 0..64 {
                assert!((t.mu.data()[i] - mu[i]).abs() < 1e-12);
                assert!((t.gamma.data()[i] - ga[i]).abs() < 1e-12);
                assert!((t.y_hat.data()[i] - yh[i]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn bounds_and_permutation(vals in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 16), 2..5), rot in 0usize..4) {
            let masks: Vec<_> = vals.iter().map(|v| Tensor::from_vec(&[4, 4], v.clone())).collect();
            let t = calibrate(&masks).unwrap();
            prop_assert_eq!(t.invariant_violations(), 0);
            let mut shuffled = masks.clone();
            shuffled.rotate_left(rot % masks.len());
            shuffled.reverse();
            prop_assert_eq!(calibrate(&shuffled).unwrap(), t);
        }

        #[test]
        fn identical_ensembles_are_fixed_points(v in proptest::collection::vec(0.0f64..=1.0, 9), n in 2usize..5) {
            let masks = vec![Tensor::from_vec(&[3, 3], v.clone()); n];
            let t = calibrate(&masks).unwrap();
            prop_assert_eq!(t.mu.data(), v.as_slice());
            prop_assert_eq!(t.y_hat.data(), v.as_slice());
            prop_assert!(t.gamma.data().iter().all(|&g| g == 0.0));
        }
    }

    fn tiny_model() -> ModelParams<f32> {
        let cfg = ModelConfig { widths: [4, 8, 12, 16], embed_dim: 8, heads: 2, head_channels: 2, ..Default::default() };
        ModelParams::init(&cfg, 21).unwrap()
    }

    fn image() -> Tensor<f32> {
        Tensor::from_vec(&[3, 32, 32], (0..3 * 32 * 32).map(|i| ((i * 7919) % 251) as f32 / 251.0).collect())
    }

    #[test]
    fn zero_rate_gives_the_plain_decoder_output() {
        let m = tiny_model();
        let img = image();
        let cfg = UplcConfig { n: 3, kind: PerturbKind::Dropout, rate: 0.0 };
        let t = generate_pseudo_labels(&m, &img, "segment the dark blob", true, &cfg, &mut rng::rng_from(1)).unwrap();
        let plain = crate::model::forward(&m, &img, "segment the dark blob", DecoderKind::Sd, true).unwrap();
        assert_eq!(t.mu, plain);
        assert_eq!(t.y_hat, plain);
        assert!(t.gamma.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn deterministic_and_pass_count_matters() {
        let m = tiny_model();
        let img = image();
        let c2 = UplcConfig::default();
        let a = generate_pseudo_labels(&m, &img, "x", true, &c2, &mut rng::rng_from(5)).unwrap();
        let b = generate_pseudo_labels(&m, &img, "x", true, &c2, &mut rng::rng_from(5)).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        let c4 = UplcConfig { n: 4, ..c2 };
        let d = generate_pseudo_labels(&m, &img, "x", true, &c4, &mut rng::rng_from(5)).unwrap();
        d.check_invariants().unwrap();
        assert_eq!(d.n_passes, 4);
        assert_ne!(a.gamma, d.gamma);
        assert!(a.gamma.data().iter().any(|&g| g > 0.0));
    }
}
