//! Prompting-upon-decoding block.
//!
//! Given decoder features `z` (flattened to `[P, C]` tokens) and prompt
//! features `t` (`[L, D]`):
//!
//! ```text
//! z'  = z + LN(MHSA(z))
//! tau = Conv1d(t) W                      // [M, C], M = L (same padding)
//! h   = z' + alpha * LN(MHCA(q = z', k = tau, v = tau))
//! ```

use crate::autograd::{Graph, NormAxis, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

use super::init::Init;

/// How much of the prompting block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInjection {
    /// Self-attention, prompt projection and gated cross-attention.
    Full,
    /// Self-attention only: the cross-attention term is excised.
    SelfAttentionOnly,
    /// The whole block is skipped.
    Off,
}

impl PromptInjection {
    pub fn from_flag(prompt_enabled: bool) -> Self {
        if prompt_enabled {
            PromptInjection::Full
        } else {
            PromptInjection::Off
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

impl AttnParams {
    fn register<T: Real>(init: &mut Init<'_, T>, prefix: &str, c: usize) -> Self {
        let mut lin = |n: &str| init.linear(&format!("{prefix}.{n}"), c, c);
        let (q_w, q_b) = lin("q");
        let (k_w, k_b) = lin("k");
        let (v_w, v_b) = lin("v");
        let (o_w, o_b) = lin("o");
        Self { q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b, self.o_w, self.o_b]
    }
}

/// Parameters of one prompting block at a stage of width `width`.
#[derive(Clone, Debug)]
pub struct PudParams {
    pub width: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub heads: usize,
    pub self_attn: AttnParams,
    pub self_norm: (ParamId, ParamId),
    /// `[kernel, D, D]`, applied as `[kernel * D, D]` on unfolded tokens.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `[D, width]`.
    pub proj_w: ParamId,
    pub cross_attn: AttnParams,
    pub cross_norm: (ParamId, ParamId),
    pub alpha: ParamId,
}

impl PudParams {
    pub fn register<T: Real>(
        init: &mut Init<'_, T>,
        prefix: &str,
        width: usize,
        embed_dim: usize,
        kernel: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config("prompt kernel must be odd".into()));
        }
        let self_attn = AttnParams::register(init, &format!("{prefix}.sa"), width);
        let self_norm = init.norm(&format!("{prefix}.sa.ln"), width);
        let conv_w = init.normal(&format!("{prefix}.conv.w"), &[kernel, embed_dim, embed_dim], kernel * embed_dim);
        let conv_b = init.zeros(&format!("{prefix}.conv.b"), &[embed_dim]);
        let proj_w = init.normal(&format!("{prefix}.proj.w"), &[embed_dim, width], embed_dim);
        let cross_attn = AttnParams::register(init, &format!("{prefix}.ca"), width);
        let cross_norm = init.norm(&format!("{prefix}.ca.ln"), width);
        let alpha = init.zeros(&format!("{prefix}.alpha"), &[1]);
        Ok(Self {
            width,
            embed_dim,
            kernel,
            heads,
            self_attn,
            self_norm,
            conv_w,
            conv_b,
            proj_w,
            cross_attn,
            cross_norm,
            alpha,
        })
    }

    /// Every parameter of the block.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.self_attn.ids().to_vec();
        v.extend([self.self_norm.0, self.self_norm.1, self.conv_w, self.conv_b, self.proj_w]);
        v.extend(self.cross_attn.ids());
        v.extend([self.cross_norm.0, self.cross_norm.1, self.alpha]);
        v
    }
}

/// Zero-padded sliding windows of `t`: row `l` holds rows `l - k/2 ..= l + k/2`.
pub fn unfold_tokens<T: Real>(t: &Tensor<f64>, kernel: usize) -> Tensor<T> {
    let (l, d) = (t.shape()[0], t.shape()[1]);
    let half = kernel / 2;
    let mut out = vec![T::zero(); l * kernel * d];
    for row in 0..l {
        for tap in 0..kernel {
            let src = row as isize + tap as isize - half as isize;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            for j in 0..d {
                out[(row * kernel + tap) * d + j] = T::from_f64_lossy(t.data()[src * d + j]);
            }
        }
    }
    Tensor::from_vec(&[l, kernel * d], out)
}

/// Intermediate values of one block evaluation, all `[P, C]` except `tau`.
pub struct PudTrace {
    pub z_prime: Var,
    pub tau: Option<Var>,
    /// Cross-attention context before its output projection.
    pub cross_context: Option<Var>,
    pub out: Var,
}

fn attend<T: Real>(g: &mut Graph<'_, T>, p: &AttnParams, q_in: Var, kv_in: Var, heads: usize) -> (Var, Var) {
    let (qw, qb, kw, kb, vw, vb, ow, ob) = (
        g.param(p.q_w),
        g.param(p.q_b),
        g.param(p.k_w),
        g.param(p.k_b),
        g.param(p.v_w),
        g.param(p.v_b),
        g.param(p.o_w),
        g.param(p.o_b),
    );
    let q = g.linear(q_in, qw, Some(qb));
    let k = g.linear(kv_in, kw, Some(kb));
    let v = g.linear(kv_in, vw, Some(vb));
    let ctx = g.attention(q, k, v, heads);
    (ctx, g.linear(ctx, ow, Some(ob)))
}

/// Token-level block on `tokens: [P, C]`.
pub fn pud_tokens<T: Real>(
    g: &mut Graph<'_, T>,
    p: &PudParams,
    tokens: Var,
    t: &Tensor<f64>,
    mode: PromptInjection,
) -> PudTrace {
    if mode == PromptInjection::Off {
        return PudTrace { z_prime: tokens, tau: None, cross_context: None, out: tokens };
    }
    let (_, sa) = attend(g, &p.self_attn, tokens, tokens, p.heads);
    let (n1g, n1b) = (g.param(p.self_norm.0), g.param(p.self_norm.1));
    let sa = g.layer_norm(sa, n1g, n1b, NormAxis::Last);
    let z_prime = g.add(tokens, sa);
    if mode == PromptInjection::SelfAttentionOnly {
        return PudTrace { z_prime, tau: None, cross_context: None, out: z_prime };
    }
    let unfolded = g.constant(unfold_tokens::<T>(t, p.kernel));
    let (cw, cb, pw) = (g.param(p.conv_w), g.param(p.conv_b), g.param(p.proj_w));
    let conv = g.linear(unfolded, cw, Some(cb));
    let tau = g.linear(conv, pw, None);
    let (ctx, ca) = attend(g, &p.cross_attn, z_prime, tau, p.heads);
    let (n2g, n2b) = (g.param(p.cross_norm.0), g.param(p.cross_norm.1));
    let ca = g.layer_norm(ca, n2g, n2b, NormAxis::Last);
    let alpha = g.param(p.alpha);
    let gated = g.scale_by(ca, alpha);
    let out = g.add(z_prime, gated);
    PudTrace { z_prime, tau: Some(tau), cross_context: Some(ctx), out }
}

/// Block on a `[C, h, w]` feature map; output has the same shape.
pub fn pud_map<T: Real>(g: &mut Graph<'_, T>, p: &PudParams, z: Var, t: &Tensor<f64>, mode: PromptInjection) -> Var {
    if mode == PromptInjection::Off {
        return z;
    }
    let shape = g.shape(z).to_vec();
    let tokens = g.transpose(z);
    let trace = pud_tokens(g, p, tokens, t, mode);
    let back = g.transpose(trace.out);
    g.reshape(back, &shape)
}

/// Standalone evaluation of one block on a `[C, h, w]` map.
pub fn pud_block<T: Real>(
    params: &ParamSet<T>,
    p: &PudParams,
    z: &Tensor<T>,
    t: &Tensor<f64>,
    mode: PromptInjection,
) -> Result<Tensor<T>> {
    if z.shape().len() != 3 || z.shape()[0] != p.width {
        return Err(Error::Shape(format!("block expects [{}, h, w], got {:?}", p.width, z.shape())));
    }
    if t.shape().len() != 2 || t.shape()[0] == 0 || t.shape()[1] != p.embed_dim {
        return Err(Error::Shape(format!("prompt must be [L>=1, {}], got {:?}", p.embed_dim, t.shape())));
    }
    let mut g = Graph::frozen(params);
    let zv = g.constant(z.clone());
    let out = pud_map(&mut g, p, zv, t, mode);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn setup(width: usize, d: usize, heads: usize, seed: u64) -> (ParamSet<f64>, PudParams) {
        let mut ps = ParamSet::new();
        let mut init = Init::new(&mut ps, seed);
        let p = PudParams::register(&mut init, "pud", width, d, 3, heads).unwrap();
        (ps, p)
    }

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = rng::rng_from(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_gate_equals_self_attention_output() {
        let (ps, p) = setup(8, 6, 2, 1);
        let z = rand_tensor(2, &[8, 3, 4]);
        let t = rand_tensor(3, &[5, 6]);
        let full = pud_block(&ps, &p, &z, &t, PromptInjection::Full).unwrap();
        let sa = pud_block(&ps, &p, &z, &t, PromptInjection::SelfAttentionOnly).unwrap();
        assert_eq!(full, sa);
        assert_eq!(full.shape(), z.shape());
        let off = pud_block(&ps, &p, &z, &t, PromptInjection::Off).unwrap();
        assert_eq!(off, z);
    }

    #[test]
    fn nonzero_gate_makes_output_prompt_dependent() {
        let (mut ps, p) = setup(8, 6, 2, 1);
        ps.get_mut(p.alpha).data_mut()[0] = 0.5;
        let z = rand_tensor(2, &[8, 3, 3]);
        let a = pud_block(&ps, &p, &z, &rand_tensor(3, &[4, 6]), PromptInjection::Full).unwrap();
        let b = pud_block(&ps, &p, &z, &rand_tensor(4, &[4, 6]), PromptInjection::Full).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn single_prompt_token_attention_returns_its_value_row() {
        let (mut ps, p) = setup(8, 6, 2, 5);
        ps.get_mut(p.alpha).data_mut()[0] = 1.0;
        let z = rand_tensor(6, &[8, 2, 3]);
        let t = rand_tensor(7, &[1, 6]);
        let mut g = Graph::frozen(&ps);
        let zv = g.constant(z);
        let tokens = g.transpose(zv);
        let trace = pud_tokens(&mut g, &p, tokens, &t, PromptInjection::Full);
        let tau = g.value(trace.tau.unwrap()).clone();
        assert_eq!(tau.shape(), &[1, 8]);
        // value projection of the single tau row, computed by hand
        let vw = ps.get(p.cross_attn.v_w).data();
        let vb = ps.get(p.cross_attn.v_b).data();
        let vrow: Vec<f64> = (0..8).map(|j| vb[j] + (0..8).map(|i| tau.data()[i] * vw[i * 8 + j]).sum::<f64>()).collect();
        let ctx = g.value(trace.cross_context.unwrap());
        for row in ctx.data().chunks(8) {
            for (a, b) in row.iter().zip(&vrow) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let (ps, p) = setup(8, 6, 2, 1);
        let z = rand_tensor(2, &[4, 3, 3]);
        let t = rand_tensor(3, &[2, 6]);
        assert!(matches!(pud_block(&ps, &p, &z, &t, PromptInjection::Full), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut ps = ParamSet::<f64>::new();
        let mut init = Init::new(&mut ps, 0);
        assert!(matches!(PudParams::register(&mut init, "x", 6, 4, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn unfold_zero_pads_edges() {
        let t = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]);
        let u = unfold_tokens::<f64>(&t, 3);
        assert_eq!(u.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }
}
