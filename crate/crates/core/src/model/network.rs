//! Encoder and decoder graphs.

use crate::autograd::{Graph, NormAxis, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;
use super::init::Init;
use super::pud::{pud_map, PromptInjection, PudParams};

/// Which of the two decoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Supervised decoder; also produces pseudo-labels and test predictions.
    Sd,
    /// Pseudo-supervised decoder.
    Pd,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn register<T: Real>(init: &mut Init<'_, T>, name: &str, cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (w, b) = init.conv(name, cout, cin, k);
        Self { w, b, stride, pad }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Norm(ParamId, ParamId);

impl Norm {
    fn register<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        let (g, b) = init.norm(name, c);
        Norm(g, b)
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.0), g.param(self.1));
        g.layer_norm(x, gm, bt, NormAxis::First)
    }
}

/// 3x3 conv, channel norm, ReLU.
#[derive(Clone, Debug)]
struct ConvNormRelu {
    conv: Conv,
    norm: Norm,
}

impl ConvNormRelu {
    fn register<T: Real>(init: &mut Init<'_, T>, name: &str, cout: usize, cin: usize) -> Self {
        Self { conv: Conv::register(init, name, cout, cin, 3, 1, 1), norm: Norm::register(init, &format!("{name}.ln"), cout) }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = self.conv.apply(g, x);
        let y = self.norm.apply(g, y);
        g.relu(y)
    }
}

/// ConvNeXt block: dw7x7 -> LN -> 1x1 (x4) -> GELU -> 1x1, residual.
#[derive(Clone, Debug)]
struct ConvNextBlock {
    dw_w: ParamId,
    dw_b: ParamId,
    norm: Norm,
    expand: Conv,
    contract: Conv,
}

impl ConvNextBlock {
    fn register<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        let dw_w = init.normal(&format!("{name}.dw.w"), &[c, 1, 7, 7], 49);
        let dw_b = init.zeros(&format!("{name}.dw.b"), &[c]);
        Self {
            dw_w,
            dw_b,
            norm: Norm::register(init, &format!("{name}.ln"), c),
            expand: Conv::register(init, &format!("{name}.pw1"), 4 * c, c, 1, 1, 0),
            contract: Conv::register(init, &format!("{name}.pw2"), c, 4 * c, 1, 1, 0),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.dw_w), g.param(self.dw_b));
        let y = g.dwconv2d(x, w, Some(b));
        let y = self.norm.apply(g, y);
        let y = self.expand.apply(g, y);
        let y = g.gelu(y);
        let y = self.contract.apply(g, y);
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: Conv,
    stem_norm: Norm,
    stages: Vec<Vec<ConvNextBlock>>,
    /// Transition into stage `k + 1`: norm then 2x2 stride-2 conv.
    downs: Vec<(Norm, Conv)>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// Sub-pixel upsample from the coarser stage (absent at the deepest stage).
    up: Option<Conv>,
    skip: ConvNormRelu,
    fuse: Option<ConvNormRelu>,
    block: ConvNormRelu,
    pud: Option<PudParams>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Index 0 is the finest stage.
    stages: Vec<DecoderStage>,
    final_up: Conv,
    head: Conv,
}

/// Compiled architecture: parameter handles for every layer.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    encoder: Encoder,
    sd: Decoder,
    pd: Decoder,
}

fn register_decoder<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, name: &str, with_pud: bool) -> Result<Decoder> {
    let mut stages = Vec::new();
    for k in 0..4 {
        let c = cfg.widths[k];
        let p = format!("{name}.s{}", k + 1);
        let deepest = k == 3;
        let up = (!deepest).then(|| Conv::register(init, &format!("{p}.up"), 4 * c, cfg.widths[k + 1], 3, 1, 1));
        let skip = ConvNormRelu::register(init, &format!("{p}.skip"), c, c);
        let fuse = (!deepest).then(|| ConvNormRelu::register(init, &format!("{p}.fuse"), c, 2 * c));
        let block = ConvNormRelu::register(init, &format!("{p}.block"), c, c);
        let pud = if with_pud {
            Some(PudParams::register(init, &format!("{p}.pud"), c, cfg.embed_dim, cfg.prompt_kernel, cfg.heads)?)
        } else {
            None
        };
        stages.push(DecoderStage { up, skip, fuse, block, pud });
    }
    let final_up = Conv::register(init, &format!("{name}.final.up"), 16 * cfg.head_channels, cfg.widths[0], 3, 1, 1);
    let head = Conv::register(init, &format!("{name}.head"), 1, cfg.head_channels, 1, 1, 0);
    Ok(Decoder { stages, final_up, head })
}

impl Network {
    /// Registers and initialises every parameter.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Network, ParamSet<T>)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(&mut params, seed);
        let w = config.widths;
        let stem = Conv::register(&mut init, "enc.stem", w[0], config.in_channels, 4, 4, 0);
        let stem_norm = Norm::register(&mut init, "enc.stem.ln", w[0]);
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for k in 0..4 {
            if k > 0 {
                let norm = Norm::register(&mut init, &format!("enc.down{k}.ln"), w[k - 1]);
                let conv = Conv::register(&mut init, &format!("enc.down{k}"), w[k], w[k - 1], 2, 2, 0);
                downs.push((norm, conv));
            }
            let blocks = (0..config.depths[k])
                .map(|j| ConvNextBlock::register(&mut init, &format!("enc.s{}.b{j}", k + 1), w[k]))
                .collect();
            stages.push(blocks);
        }
        let encoder = Encoder { stem, stem_norm, stages, downs };
        let sd = register_decoder(&mut init, config, "dec.sd", true)?;
        let pd = register_decoder(&mut init, config, "dec.pd", config.pud_in_pd)?;
        Ok((Network { config: config.clone(), encoder, sd, pd }, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn decoder(&self, which: DecoderKind) -> &Decoder {
        match which {
            DecoderKind::Sd => &self.sd,
            DecoderKind::Pd => &self.pd,
        }
    }

    /// Prompting block of `which` at stage `k` (1-based), if present.
    pub fn pud(&self, which: DecoderKind, k: usize) -> Option<&PudParams> {
        self.decoder(which).stages.get(k.wrapping_sub(1))?.pud.as_ref()
    }

    /// Parameters belonging to the shared encoder.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Stage features `v1..v4` of `image: [C_in, H, W]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<[Var; 4]> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::Shape(format!("image must be [{}, H, W], got {s:?}", self.config.in_channels)));
        }
        self.config.check_input(s[1], s[2])?;
        let enc = &self.encoder;
        let x = enc.stem.apply(g, image);
        let mut x = enc.stem_norm.apply(g, x);
        let mut feats = Vec::with_capacity(4);
        for k in 0..4 {
            if k > 0 {
                let (norm, conv) = &enc.downs[k - 1];
                x = norm.apply(g, x);
                x = conv.apply(g, x);
            }
            for block in &enc.stages[k] {
                x = block.apply(g, x);
            }
            feats.push(x);
        }
        Ok([feats[0], feats[1], feats[2], feats[3]])
    }

    /// Logits `[1, H, W]` from stage features.
    pub fn decode_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        feats: &[Var; 4],
        prompt: &Tensor<f64>,
        which: DecoderKind,
        mode: PromptInjection,
    ) -> Result<Var> {
        for (k, &f) in feats.iter().enumerate() {
            let s = g.shape(f);
            if s.len() != 3 || s[0] != self.config.widths[k] {
                return Err(Error::Shape(format!("stage {} features {s:?} do not match width {}", k + 1, self.config.widths[k])));
            }
        }
        if mode != PromptInjection::Off && (prompt.shape().len() != 2 || prompt.shape()[1] != self.config.embed_dim || prompt.shape()[0] == 0) {
            return Err(Error::Shape(format!("prompt must be [L>=1, {}], got {:?}", self.config.embed_dim, prompt.shape())));
        }
        let dec = self.decoder(which);
        let mut h: Option<Var> = None;
        for k in (0..4).rev() {
            let st = &dec.stages[k];
            let skip = st.skip.apply(g, feats[k]);
            let z = match (h, &st.up, &st.fuse) {
                (Some(prev), Some(up), Some(fuse)) => {
                    let u = up.apply(g, prev);
                    let u = g.pixel_shuffle(u, 2);
                    if g.shape(u)[1..] != g.shape(skip)[1..] {
                        return Err(Error::Shape(format!("upsampled {:?} vs skip {:?}", g.shape(u), g.shape(skip))));
                    }
                    let cat = g.concat(u, skip);
                    fuse.apply(g, cat)
                }
                _ => skip,
            };
            let z = st.block.apply(g, z);
            h = Some(match &st.pud {
                Some(p) => pud_map(g, p, z, prompt, mode),
                None => z,
            });
        }
        let y = dec.final_up.apply(g, h.expect("four stages"));
        let y = g.pixel_shuffle(y, 4);
        let y = g.relu(y);
        Ok(dec.head.apply(g, y))
    }
}

/// Standalone sub-pixel upsample: conv to `r^2 * C'` channels then shuffle.
/// `weight: [r^2 C', C, k, k]` with odd `k`, same padding.
pub fn subpixel_upsample<T: Real>(z: &Tensor<T>, r: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if r < 2 {
        return Err(Error::Config(format!("upsample factor {r} must be >= 2")));
    }
    let ws = weight.shape();
    if ws.len() != 4 || z.shape().len() != 3 || ws[1] != z.shape()[0] || ws[2] % 2 == 0 {
        return Err(Error::Shape(format!("weight {ws:?} does not fit input {:?}", z.shape())));
    }
    if ws[0] % (r * r) != 0 || bias.shape() != [ws[0]] {
        return Err(Error::Shape(format!("{} output channels not divisible by {}", ws[0], r * r)));
    }
    let ps = ParamSet::new();
    let mut g = Graph::frozen(&ps);
    let x = g.constant(z.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.conv2d(x, w, Some(b), 1, ws[2] / 2);
    let y = g.pixel_shuffle(y, r);
    Ok(g.value(y).clone())
}
