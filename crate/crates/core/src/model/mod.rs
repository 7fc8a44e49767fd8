//! The prompt-conditioned dual-decoder segmentation network.

pub mod checkpoint;
mod config;
mod init;
mod network;
pub mod prompt;
pub mod pud;

use crate::autograd::{sigmoid, Graph};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub use config::{ModelConfig, STAGE_STRIDES};
pub use init::Init;
pub use network::{subpixel_upsample, DecoderKind, Network};
pub use prompt::{encode_prompt, tokenize, PromptEncoder, PromptFeatures};
pub use pud::{pud_block, PromptInjection, PudParams};

/// Stage outputs `v1..v4`, each `[C_k, H/d_k, W/d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Real> MultiScaleFeatures<T> {
    pub fn strides(&self) -> [usize; 4] {
        STAGE_STRIDES
    }

    /// `(h, w, c)` of every stage.
    pub fn dims(&self) -> [(usize, usize, usize); 4] {
        let d = |t: &Tensor<T>| (t.shape()[1], t.shape()[2], t.shape()[0]);
        [d(&self.levels[0]), d(&self.levels[1]), d(&self.levels[2]), d(&self.levels[3])]
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }
}

/// Architecture, parameter values and prompt encoder.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real> {
    pub net: Network,
    pub params: ParamSet<T>,
    pub prompts: PromptEncoder,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = Network::build(config, seed)?;
        let prompts = match &config.prompt_embeddings {
            Some(path) => PromptEncoder::from_file(config.embed_dim, config.prompt_seed, path)?,
            None => PromptEncoder::hashed(config.embed_dim, config.prompt_seed),
        };
        Ok(Self { net, params, prompts })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn encode_prompt(&self, text: &str) -> Result<PromptFeatures> {
        self.prompts.encode(text)
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { net: self.net.clone(), params: self.params.cast(), prompts: self.prompts.clone() }
    }
}

fn check_image<T: Real>(config: &ModelConfig, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != config.in_channels {
        return Err(Error::Shape(format!("image must be [{}, H, W], got {s:?}", config.in_channels)));
    }
    config.check_input(s[1], s[2])
}

/// Multi-scale features of `image: [3, H, W]`.
pub fn encode<T: Real>(model: &ModelParams<T>, image: &Tensor<T>) -> Result<MultiScaleFeatures<T>> {
    check_image(model.config(), image)?;
    let mut g = Graph::frozen(&model.params);
    let x = g.constant(image.clone());
    let f = model.net.encode_graph(&mut g, x)?;
    Ok(MultiScaleFeatures { levels: f.map(|v| g.value(v).clone()) })
}

/// Logits `[H, W]` of one decoder.
pub fn decode<T: Real>(
    model: &ModelParams<T>,
    feats: &MultiScaleFeatures<T>,
    prompt: &PromptFeatures,
    which: DecoderKind,
    mode: PromptInjection,
) -> Result<Tensor<T>> {
    let mut g = Graph::frozen(&model.params);
    let vars = feats.levels.clone().map(|t| g.constant(t));
    let y = model.net.decode_graph(&mut g, &vars, &prompt.t, which, mode)?;
    let out = g.value(y);
    let (h, w) = (out.shape()[1], out.shape()[2]);
    Ok(out.clone().reshaped(&[h, w]))
}

/// Probabilities `[H, W]`: encode, prompt, decode, sigmoid.
pub fn forward<T: Real>(
    model: &ModelParams<T>,
    image: &Tensor<T>,
    prompt_text: &str,
    which: DecoderKind,
    prompt_enabled: bool,
) -> Result<Tensor<T>> {
    let feats = encode(model, image)?;
    let prompt = model.encode_prompt(prompt_text)?;
    let logits = decode(model, &feats, &prompt, which, PromptInjection::from_flag(prompt_enabled))?;
    Ok(logits.map(sigmoid))
}
