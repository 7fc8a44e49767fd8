//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied. Nodes whose inputs carry
//! no gradient are recorded without their backward buffers, so a graph built
//! over constants only is a plain forward evaluator.
//!
//! Layouts: feature maps are `[C, H, W]`, token matrices are `[P, C]`.

use std::collections::HashMap;

use crate::params::{ParamId, ParamSet};
use crate::tensor::{gemm, MatRef, Real, Tensor};
use crate::training::loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which axis a layer norm reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Axis 0 of `[C, ...]`: per-position channel normalization.
    First,
    /// Last axis of `[rows, C]`: per-token normalization.
    Last,
}

pub const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffer; `None` for pointwise convs, which read `x` directly.
        cols: Option<Vec<T>>,
    },
    DwConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: NormAxis,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Concat(Var, Var),
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SegLoss {
        p: Var,
        target: Vec<T>,
        w_bce: T,
        w_dice: T,
    },
}

struct Node<T> {
    /// `None` for parameter leaves, which live in the borrowed set.
    value: Option<Tensor<T>>,
    param: Option<ParamId>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    train_params: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph whose parameters receive gradients.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), train_params: true }
    }

    /// Forward-only graph: parameters are treated as constants.
    pub fn frozen(params: &'p ParamSet<T>) -> Self {
        Self { train_params: false, ..Self::new(params) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.params.get(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Some(value), param: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|&v| self.requires_grad(v))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Non-parameter leaf whose gradient is reported by [`Grads::leaf`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(t), param: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, param: Some(id), op: Op::Leaf, requires_grad: self.train_params });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, k, k]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let np = ho * wo;
        let ckk = cin * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols = if pointwise { None } else { Some(im2col(self.value(x).data(), cin, h, wd, k, stride, pad, ho, wo)) };
        let mut out = vec![T::zero(); cout * np];
        {
            let wv = self.value(w).data();
            let colsref = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(T::one(), MatRef::new(wv, cout, ckk), MatRef::new(colsref, ckk, np), T::zero(), &mut out, np);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, row) in out.chunks_mut(np).enumerate() {
                    for v in row {
                        *v += bv[o];
                    }
                }
            }
        }
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        let keep_cols = rg && self.requires_grad(w);
        let cols = if keep_cols { cols } else { None };
        self.push(Tensor::from_vec(&[cout, ho, wo], out), Op::Conv2d { x, w, b, stride, pad, cols }, rg)
    }

    /// Depthwise "same" convolution, stride 1, odd kernel, `w: [C, 1, k, k]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        assert_eq!(ws[0], c, "dwconv channel mismatch");
        let k = ws[ws.len() - 1];
        assert!(k % 2 == 1, "dwconv kernel must be odd");
        let mut out = vec![T::zero(); c * h * wd];
        dwconv_forward(self.value(x).data(), self.value(w).data(), &mut out, c, h, wd, k);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, plane) in out.chunks_mut(h * wd).enumerate() {
                for v in plane {
                    *v += bv[ch];
                }
            }
        }
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        self.push(Tensor::from_vec(&[c, h, wd], out), Op::DwConv { x, w, b }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: NormAxis) -> Var {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        let (n, m) = ln_dims(&shape, axis);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), n, "layer norm scale width mismatch");
        let eps = T::from_f64_lossy(LN_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); n * m];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); n * m];
        for i in 0..m {
            let idx = |j: usize| ln_index(axis, i, j, n, m);
            let mean = (0..n).map(|j| xv[idx(j)]).sum::<T>() / nf;
            let var = (0..n).map(|j| (xv[idx(j)] - mean).powi(2)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let p = idx(j);
                let xh = (xv[p] - mean) * r;
                xhat[p] = xh;
                out[p] = xh * gv[j] + bv[j];
            }
        }
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, gamma, beta, axis, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        let rg = self.requires_grad(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Multiply by a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale must be a scalar");
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        let rg = self.any_grad(&[Some(x), Some(s)]);
        self.push(out, Op::ScaleBy { x, s }, rg)
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[1..], sb[1..], "concat trailing shape mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(a, b), rg)
    }

    /// `[C*r*r, H, W] -> [C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s[0] % (r * r) == 0, "pixel shuffle channels not divisible by r^2");
        let out = pixel_shuffle(self.value(x), r);
        let rg = self.requires_grad(x);
        self.push(out, Op::PixelShuffle { x, r }, rg)
    }

    /// Swap the two axes of `[a, b...]` viewed as a matrix `[a, prod(b)]`.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let rows = s[0];
        let cols: usize = s[1..].iter().product();
        let out = transpose(self.value(x).data(), rows, cols);
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[cols, rows], out), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.requires_grad(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// `x: [P, Cin]` times `w` viewed as `[Cin, Cout]`, plus bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [P, Cin]");
        let (p, cin) = (xs[0], xs[1]);
        let wl = self.value(w).len();
        assert!(wl % cin == 0, "linear weight does not match input width");
        let cout = wl / cin;
        let mut out = vec![T::zero(); p * cout];
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), p, cin),
            MatRef::new(self.value(w).data(), cin, cout),
            T::zero(),
            &mut out,
            cout,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        self.push(Tensor::from_vec(&[p, cout], out), Op::Linear { x, w, b }, rg)
    }

    /// Scaled dot-product attention with `heads` heads on pre-projected
    /// `q: [Pq, C]`, `k: [Pk, C]`, `v: [Pk, C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (pq, c) = (qs[0], qs[1]);
        let pk = ks[0];
        assert_eq!(ks[1], c, "attention key width mismatch");
        assert_eq!(vs, ks, "attention value shape mismatch");
        assert!(heads > 0 && c % heads == 0, "heads must divide width");
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * pq * pk];
        let mut out = vec![T::zero(); pq * c];
        for h in 0..heads {
            let a = &mut probs[h * pq * pk..(h + 1) * pq * pk];
            gemm(
                scale,
                MatRef::strided(&qv[h * dh..], pq, dh, c, 1),
                MatRef::strided(&kv[h * dh..], pk, dh, c, 1).t(),
                T::zero(),
                a,
                pk,
            );
            for row in a.chunks_mut(pk) {
                softmax_in_place(row);
            }
            gemm(
                T::one(),
                MatRef::new(a, pq, pk),
                MatRef::strided(&vv[h * dh..], pk, dh, c, 1),
                T::zero(),
                &mut out[h * dh..],
                c,
            );
        }
        let rg = self.any_grad(&[Some(q), Some(k), Some(v)]);
        let probs = if rg { probs } else { Vec::new() };
        self.push(Tensor::from_vec(&[pq, c], out), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Weighted BCE + Dice on probabilities against fixed targets; scalar output.
    pub fn seg_loss(&mut self, p: Var, target: &[T], w_bce: T, w_dice: T) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), target.len(), "loss shape mismatch");
        let l = loss::combined_loss_slice(pv, target, w_bce, w_dice);
        let rg = self.requires_grad(p);
        self.push(Tensor::scalar(l), Op::SegLoss { p, target: target.to_vec(), w_bce, w_dice }, rg)
    }

    /// Back-propagate from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads<T> {
        self.backward_scaled(root, T::one())
    }

    /// Back-propagate from `root` with every seed entry equal to `seed`.
    pub fn backward_scaled(&self, root: Var, seed: T) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads { params: HashMap::new(), leaves: HashMap::new() };
        if !self.requires_grad(root) {
            return out;
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match node.param {
                    Some(id) => {
                        out.params.insert(id, g);
                    }
                    None => {
                        out.leaves.insert(i, g);
                    }
                }
                continue;
            }
            self.backward_node(&node.op, Var(i), g, &mut grads);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, op: &Op<T>, me: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let os = self.shape(me);
                let (ho, wo) = (os[1], os[2]);
                let np = ho * wo;
                let ckk = cin * k * k;
                let gd = g.data();
                if self.requires_grad(*w) {
                    let colsref = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    let mut dw = vec![T::zero(); cout * ckk];
                    gemm(T::one(), MatRef::new(gd, cout, np), MatRef::new(colsref, ckk, np).t(), T::zero(), &mut dw, ckk);
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db: Vec<T> = gd.chunks(np).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[cout], db));
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); ckk * np];
                    gemm(
                        T::one(),
                        MatRef::new(self.value(*w).data(), cout, ckk).t(),
                        MatRef::new(gd, cout, np),
                        T::zero(),
                        &mut dcols,
                        np,
                    );
                    let dx = if k == 1 && *stride == 1 && *pad == 0 {
                        dcols
                    } else {
                        col2im(&dcols, cin, h, wd, k, *stride, *pad, ho, wo)
                    };
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
            }
            Op::DwConv { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let k = ws[ws.len() - 1];
                let gd = g.data();
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); c * h * wd];
                    dwconv_backward_input(gd, self.value(*w).data(), &mut dx, c, h, wd, k);
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); c * k * k];
                    dwconv_backward_weight(gd, self.value(*x).data(), &mut dw, c, h, wd, k);
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db: Vec<T> = gd.chunks(h * wd).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[c], db));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, axis, xhat, rstd } => {
                let shape = self.shape(*x).to_vec();
                let (n, m) = ln_dims(&shape, *axis);
                let gd = g.data();
                let gv = self.value(*gamma).data();
                let nf = T::from_usize(n).unwrap();
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = vec![T::zero(); n * m];
                let mut dxhat = vec![T::zero(); n];
                for i in 0..m {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let p = ln_index(*axis, i, j, n, m);
                        dgamma[j] += gd[p] * xhat[p];
                        dbeta[j] += gd[p];
                        let d = gd[p] * gv[j];
                        dxhat[j] = d;
                        s1 += d;
                        s2 += d * xhat[p];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for j in 0..n {
                        let p = ln_index(*axis, i, j, n, m);
                        dx[p] = rstd[i] * (dxhat[j] - m1 - xhat[p] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx));
                let gshape = self.shape(*gamma).to_vec();
                self.accumulate(grads, *gamma, Tensor::from_vec(&gshape, dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&gshape, dbeta));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d: Vec<T> = xv.data().iter().zip(g.data()).map(|(&xx, &gg)| gg * gelu_grad(xx)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xx, &gg)| if xx > T::zero() { gg } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::Sigmoid(x) => {
                let y = self.value(me);
                let d: Vec<T> = y.data().iter().zip(g.data()).map(|(&yy, &gg)| gg * yy * (T::one() - yy)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::Add(a, b) => {
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.requires_grad(*s) {
                    let ds: T = self.value(*x).data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![ds]));
                }
                self.accumulate(grads, *x, g.map(|v| v * sv));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let (ga, gb) = g.data().split_at(na);
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                self.accumulate(grads, *a, Tensor::from_vec(&sa, ga.to_vec()));
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gb.to_vec()));
            }
            Op::PixelShuffle { x, r } => {
                let xs = self.shape(*x).to_vec();
                let dx = pixel_unshuffle(&g, *r);
                self.accumulate(grads, *x, dx.reshaped(&xs));
            }
            Op::Transpose(x) => {
                let xs = self.shape(*x).to_vec();
                let rows = xs[0];
                let cols: usize = xs[1..].iter().product();
                let dx = transpose(g.data(), cols, rows);
                self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshaped(&xs));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (p, cin) = (xs[0], xs[1]);
                let cout = self.value(*w).len() / cin;
                let gd = g.data();
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); p * cin];
                    gemm(
                        T::one(),
                        MatRef::new(gd, p, cout),
                        MatRef::new(self.value(*w).data(), cin, cout).t(),
                        T::zero(),
                        &mut dx,
                        cin,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); cin * cout];
                    gemm(
                        T::one(),
                        MatRef::new(self.value(*x).data(), p, cin).t(),
                        MatRef::new(gd, p, cout),
                        T::zero(),
                        &mut dw,
                        cout,
                    );
                    let ws = self.shape(*w).to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[cout], db));
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (pq, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                let pk = self.shape(*k)[0];
                let dh = c / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gd = g.data();
                let mut dq = vec![T::zero(); pq * c];
                let mut dk = vec![T::zero(); pk * c];
                let mut dv = vec![T::zero(); pk * c];
                let mut da = vec![T::zero(); pq * pk];
                for h in 0..*heads {
                    let a = &probs[h * pq * pk..(h + 1) * pq * pk];
                    let go = MatRef::strided(&gd[h * dh..], pq, dh, c, 1);
                    gemm(T::one(), MatRef::new(a, pq, pk).t(), go, T::zero(), &mut dv[h * dh..], c);
                    gemm(T::one(), go, MatRef::strided(&vv[h * dh..], pk, dh, c, 1).t(), T::zero(), &mut da, pk);
                    for (arow, drow) in a.chunks(pk).zip(da.chunks_mut(pk)) {
                        let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                        for (d, &aa) in drow.iter_mut().zip(arow) {
                            *d = aa * (*d - dot);
                        }
                    }
                    gemm(
                        scale,
                        MatRef::new(&da, pq, pk),
                        MatRef::strided(&kv[h * dh..], pk, dh, c, 1),
                        T::zero(),
                        &mut dq[h * dh..],
                        c,
                    );
                    gemm(
                        scale,
                        MatRef::new(&da, pq, pk).t(),
                        MatRef::strided(&qv[h * dh..], pq, dh, c, 1),
                        T::zero(),
                        &mut dk[h * dh..],
                        c,
                    );
                }
                self.accumulate(grads, *q, Tensor::from_vec(&[pq, c], dq));
                self.accumulate(grads, *k, Tensor::from_vec(&[pk, c], dk));
                self.accumulate(grads, *v, Tensor::from_vec(&[pk, c], dv));
            }
            Op::SegLoss { p, target, w_bce, w_dice } => {
                let pv = self.value(*p);
                let mut d = loss::combined_loss_grad(pv.data(), target, *w_bce, *w_dice);
                let seed = g.data()[0];
                for x in &mut d {
                    *x = *x * seed;
                }
                self.accumulate(grads, *p, Tensor::from_vec(pv.shape(), d));
            }
        }
    }
}

fn ln_dims(shape: &[usize], axis: NormAxis) -> (usize, usize) {
    let total: usize = shape.iter().product();
    let n = match axis {
        NormAxis::First => shape[0],
        NormAxis::Last => shape[shape.len() - 1],
    };
    (n, total / n)
}

#[inline]
fn ln_index(axis: NormAxis, i: usize, j: usize, n: usize, m: usize) -> usize {
    match axis {
        NormAxis::First => j * m + i,
        NormAxis::Last => i * n + j,
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()), T::from_f64_lossy(0.044715))
}

/// tanh approximation of GELU.
fn gelu_fwd<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn transpose<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let np = ho * wo;
    let mut cols = vec![T::zero(); cin * k * k * np];
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * np..][..np];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let np = ho * wo;
    let mut x = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * np..][..np];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Valid output range along one axis for kernel tap `kk`.
#[inline]
fn tap_range(kk: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

fn dwconv_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], c: usize, h: usize, wd: usize, k: usize) {
    let pad = k / 2;
    for ch in 0..c {
        let xp = &x[ch * h * wd..(ch + 1) * h * wd];
        let op = &mut out[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, pad, h);
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let (x0, x1) = tap_range(kx, pad, wd);
                if x0 == x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy + ky - pad;
                    let src = &xp[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                    let dst = &mut op[oy * wd + x0..oy * wd + x1];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

fn dwconv_backward_input<T: Real>(g: &[T], w: &[T], dx: &mut [T], c: usize, h: usize, wd: usize, k: usize) {
    let pad = k / 2;
    for ch in 0..c {
        let gp = &g[ch * h * wd..(ch + 1) * h * wd];
        let dp = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, pad, h);
            for kx in 0..k {
                let wv = w[(ch * k + ky) * k + kx];
                let (x0, x1) = tap_range(kx, pad, wd);
                if x0 == x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy + ky - pad;
                    let src = &gp[oy * wd + x0..oy * wd + x1];
                    let dst = &mut dp[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

fn dwconv_backward_weight<T: Real>(g: &[T], x: &[T], dw: &mut [T], c: usize, h: usize, wd: usize, k: usize) {
    let pad = k / 2;
    for ch in 0..c {
        let gp = &g[ch * h * wd..(ch + 1) * h * wd];
        let xp = &x[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = tap_range(kx, pad, wd);
                if x0 == x1 {
                    continue;
                }
                let mut acc = T::zero();
                for oy in y0..y1 {
                    let iy = oy + ky - pad;
                    let gs = &gp[oy * wd + x0..oy * wd + x1];
                    let xs = &xp[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                    acc += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                }
                dw[(ch * k + ky) * k + kx] += acc;
            }
        }
    }
}

/// `[C*r*r, H, W] -> [C, H*r, W*r]` with
/// `out(c, y, x) = in(c*r*r + (y % r)*r + (x % r), y / r, x / r)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let s = x.shape();
    let (cr, h, w) = (s[0], s[1], s[2]);
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let src_c = ch * r * r + (y % r) * r + (xx % r);
                out[(ch * oh + y) * ow + xx] = xd[(src_c * h + y / r) * w + xx / r];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Tensor<T> {
    let s = y.shape();
    let (c, oh, ow) = (s[0], s[1], s[2]);
    let (h, w) = (oh / r, ow / r);
    let yd = y.data();
    let mut out = vec![T::zero(); c * r * r * h * w];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let src_c = ch * r * r + (yy % r) * r + (xx % r);
                out[(src_c * h + yy / r) * w + xx / r] = yd[(ch * oh + yy) * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[c * r * r, h, w], out)
}
