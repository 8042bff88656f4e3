//! Layers and transformer/coupling blocks shared by the encoders and decoder.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so that
//! one set of weights can be evaluated on any number of tapes.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ConvSpec, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[cout]));
        Self { weight, bias, spec }
    }

    pub fn pointwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 1, ConvSpec::same(1), bias)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, self.spec);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.channel_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub spec: ConvSpec,
}

impl DepthwiseConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[channels, k, k], k * k, rng);
        Self { weight, spec }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        tape.depthwise(x, w, self.spec)
    }
}

/// Layer normalization across channels with a per-channel affine map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let s = tape.channel_scale(n, g);
        tape.channel_bias(s, b)
    }
}

/// Multi-head attention across channels ("transposed" attention): each head
/// builds a `c×c` affinity from L2-normalised query/key rows that span the
/// whole image, so every output pixel mixes information from every position.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    heads: usize,
    temperature: ParamId,
    qkv: Conv2d,
    qkv_dw: DepthwiseConv,
    out: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            temperature: store.add_full(format!("{name}.temperature"), &[heads], 1.0),
            qkv: Conv2d::pointwise(store, rng, &format!("{name}.qkv"), dim, 3 * dim, false),
            qkv_dw: DepthwiseConv::new(store, rng, &format!("{name}.qkv_dw"), 3 * dim, 3, ConvSpec::same(1)),
            out: Conv2d::pointwise(store, rng, &format!("{name}.out"), dim, dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (dim, h, w) = (shape[0], shape[1], shape[2]);
        let c = dim / self.heads;
        let qkv = self.qkv.forward(tape, store, x);
        let qkv = self.qkv_dw.forward(tape, store, qkv);
        let qkv = tape.reshape(qkv, &[3 * dim, h * w]);
        let temp = tape.param(store, self.temperature);
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = tape.slice(qkv, hd * c, c);
            let k = tape.slice(qkv, dim + hd * c, c);
            let v = tape.slice(qkv, 2 * dim + hd * c, c);
            let q = tape.l2_normalize_rows(q, 1e-12);
            let k = tape.l2_normalize_rows(k, 1e-12);
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt);
            let t = tape.slice(temp, hd, 1);
            let logits = tape.mul_scalar(logits, t);
            let attn = tape.softmax_rows(logits);
            heads.push(tape.matmul(attn, v));
        }
        let y = tape.concat(&heads);
        let y = tape.reshape(y, &[dim, h, w]);
        self.out.forward(tape, store, y)
    }
}

/// Gated depthwise feed-forward: `out(gelu(a) * b)` with `[a, b] = dw(in(x))`.
#[derive(Clone, Debug)]
pub struct GatedFeedForward {
    hidden: usize,
    input: Conv2d,
    dw: DepthwiseConv,
    out: Conv2d,
}

impl GatedFeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            hidden,
            input: Conv2d::pointwise(store, rng, &format!("{name}.in"), dim, 2 * hidden, false),
            dw: DepthwiseConv::new(store, rng, &format!("{name}.dw"), 2 * hidden, 3, ConvSpec::same(1)),
            out: Conv2d::pointwise(store, rng, &format!("{name}.out"), hidden, dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.input.forward(tape, store, x);
        let y = self.dw.forward(tape, store, y);
        let a = tape.slice(y, 0, self.hidden);
        let b = tape.slice(y, self.hidden, self.hidden);
        let a = tape.gelu(a);
        let y = tape.mul(a, b);
        self.out.forward(tape, store, y)
    }
}

/// Pre-norm transformer block: channel attention then gated feed-forward,
/// each on a residual branch.
#[derive(Clone, Debug)]
pub struct RestormerBlock {
    norm1: ChannelNorm,
    attn: ChannelAttention,
    norm2: ChannelNorm,
    ffn: GatedFeedForward,
}

impl RestormerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), dim),
            attn: ChannelAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: GatedFeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = self.norm1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, n);
        let x = tape.add(x, a);
        let n = self.norm2.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, n);
        tape.add(x, f)
    }
}

/// Long-short range block: a global channel-attention branch and a local
/// depthwise-convolution branch run side by side, merged by a 1×1
/// convolution, followed by a gated feed-forward.
#[derive(Clone, Debug)]
pub struct LiteTransformerBlock {
    norm1: ChannelNorm,
    global: ChannelAttention,
    local_in: Conv2d,
    local_dw: DepthwiseConv,
    merge: Conv2d,
    norm2: ChannelNorm,
    ffn: GatedFeedForward,
}

impl LiteTransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), dim),
            global: ChannelAttention::new(store, rng, &format!("{name}.global"), dim, heads),
            local_in: Conv2d::pointwise(store, rng, &format!("{name}.local_in"), dim, dim, true),
            local_dw: DepthwiseConv::new(store, rng, &format!("{name}.local_dw"), dim, 3, ConvSpec::same(1)),
            merge: Conv2d::pointwise(store, rng, &format!("{name}.merge.out"), 2 * dim, dim, false),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: GatedFeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = self.norm1.forward(tape, store, x);
        let g = self.global.forward(tape, store, n);
        let l = self.local_in.forward(tape, store, n);
        let l = self.local_dw.forward(tape, store, l);
        let l = tape.gelu(l);
        let both = tape.concat(&[g, l]);
        let m = self.merge.forward(tape, store, both);
        let x = tape.add(x, m);
        let n = self.norm2.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, n);
        tape.add(x, f)
    }
}

/// Inverted residual sub-network used inside coupling blocks:
/// expand ×2, depthwise 3×3 (mirrored borders), project back.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    expand: Conv2d,
    dw: DepthwiseConv,
    project: Conv2d,
}

impl InvertedResidual {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        Self {
            expand: Conv2d::pointwise(store, rng, &format!("{name}.expand"), dim, 2 * dim, false),
            dw: DepthwiseConv::new(store, rng, &format!("{name}.dw"), 2 * dim, 3, ConvSpec::reflect()),
            project: Conv2d::pointwise(store, rng, &format!("{name}.out"), 2 * dim, dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.expand.forward(tape, store, x);
        let y = tape.gelu(y);
        let y = self.dw.forward(tape, store, y);
        let y = tape.gelu(y);
        self.project.forward(tape, store, y)
    }
}

/// Affine coupling on a channel split `[z1, z2]`:
///
/// ```text
/// z2' = z2 + phi(z1)
/// z1' = z1 * exp(rho(z2')) + eta(z2')
/// ```
///
/// which is inverted exactly by `z1 = (z1' - eta(z2')) * exp(-rho(z2'))`,
/// `z2 = z2' - phi(z1)`.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    half: usize,
    phi: InvertedResidual,
    rho: InvertedResidual,
    eta: InvertedResidual,
}

impl CouplingBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        assert!(dim % 2 == 0, "coupling needs an even channel count");
        let half = dim / 2;
        Self {
            half,
            phi: InvertedResidual::new(store, rng, &format!("{name}.phi"), half),
            rho: InvertedResidual::new(store, rng, &format!("{name}.rho"), half),
            eta: InvertedResidual::new(store, rng, &format!("{name}.eta"), half),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let z1 = tape.slice(x, 0, self.half);
        let z2 = tape.slice(x, self.half, self.half);
        let p = self.phi.forward(tape, store, z1);
        let z2 = tape.add(z2, p);
        let r = self.rho.forward(tape, store, z2);
        let s = tape.exp(r);
        let e = self.eta.forward(tape, store, z2);
        let z1 = tape.mul(z1, s);
        let z1 = tape.add(z1, e);
        tape.concat(&[z1, z2])
    }

    pub fn inverse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Var {
        let z1 = tape.slice(y, 0, self.half);
        let z2 = tape.slice(y, self.half, self.half);
        let r = self.rho.forward(tape, store, z2);
        let r = tape.scale(r, -1.0);
        let s = tape.exp(r);
        let e = self.eta.forward(tape, store, z2);
        let z1 = tape.sub(z1, e);
        let z1 = tape.mul(z1, s);
        let p = self.phi.forward(tape, store, z1);
        let z2 = tape.sub(z2, p);
        tape.concat(&[z1, z2])
    }
}

/// Sets every parameter whose name ends with `.out.weight` to zero, which
/// turns all residual blocks and coupling blocks into identities.
pub fn zero_branch_outputs<T: Scalar>(store: &mut ParamStore<T>) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).ends_with(".out.weight")).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}
