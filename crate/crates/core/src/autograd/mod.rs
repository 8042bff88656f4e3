//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into the parents of each
//! node that (transitively) depends on a parameter or a differentiable leaf.
//! Constants never receive gradients.

mod conv;

use alloc::vec;
use alloc::vec::Vec;

pub use conv::{reflect_index, ConvSpec, Padding};
use conv::Geometry;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Elu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Sigmoid,
    Exp,
    Abs,
    /// Square root with the derivative at zero taken as zero.
    Sqrt,
    Square,
    Tanh,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv(Var, Var, ConvSpec),
    Depthwise(Var, Var, ConvSpec),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Unary(Var, Unary),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    L2NormRows(Var, Vec<T>),
    OuterSum(Var, Var),
    Crop { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    MeanSpatial(Var),
    Scatter { x: Var, pixels: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SubMean(Var),
    Correlation(Var, Var),
    Cosine(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape, once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(t, Op::AddConst(a), ng)
    }

    /// `a * s` with `s` a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let t = self.value(a).map(|v| v * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(t, Op::MulScalar(a, s), ng)
    }

    /// Adds `b[c]` to every element of leading index `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.dim(0);
        assert_eq!(tb.numel(), c, "bias length must match leading dim");
        let per = tx.numel() / c;
        let mut out = tx.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let bv = tb.data()[ci];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::ChannelBias(x, b), ng)
    }

    /// Multiplies every element of leading index `c` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.dim(0);
        assert_eq!(ts.numel(), c, "scale length must match leading dim");
        let per = tx.numel() / c;
        let mut out = tx.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let sv = ts.data()[ci];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ChannelScale(x, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.rank() == 2 && tb.rank() == 2, "matmul needs matrices");
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        assert_eq!(k, tb.dim(0), "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2);
        let out = transpose2(ta);
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Dense 2-D convolution of `x: [cin, h, w]` with `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.rank(), 3, "conv2d input must be [C, H, W]");
        let (cout, cin, k) = (tw.dim(0), tw.dim(1), tw.dim(2));
        assert_eq!(cin, tx.dim(0), "conv2d channel mismatch");
        let g = Geometry::new(cin, tx.dim(1), tx.dim(2), k, spec);
        let out = conv::conv_forward(&g, tx.data(), tw.data(), cout);
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_vec(&[cout, g.ho, g.wo], out), Op::Conv(x, w, spec), ng)
    }

    /// Per-channel convolution with `w: [c, k, k]`.
    pub fn depthwise(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.rank(), 3, "depthwise input must be [C, H, W]");
        let (c, k) = (tw.dim(0), tw.dim(1));
        assert_eq!(c, tx.dim(0), "depthwise channel mismatch");
        let g = Geometry::new(c, tx.dim(1), tx.dim(2), k, spec);
        let out = conv::depthwise_forward(&g, tx.data(), tw.data());
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_vec(&[c, g.ho, g.wo], out), Op::Depthwise(x, w, spec), ng)
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &rest[..], "concat trailing dims differ");
            lead += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Rows `start..start + len` of the leading dimension.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.dim(0), "slice out of range");
        let per = t.numel() / t.dim(0);
        let data = t.data()[start * per..(start + len) * per].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data), Op::Slice(a, start), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let t = self.value(a);
        let out = match f {
            Unary::LeakyRelu(s) => {
                let s = T::lit(s);
                t.map(|v| if v > T::zero() { v } else { s * v })
            }
            Unary::Elu => t.map(|v| if v > T::zero() { v } else { v.exp_m1() }),
            Unary::Gelu => t.map(gelu),
            Unary::Sigmoid => t.map(sigmoid),
            Unary::Exp => t.map(|v| v.exp()),
            Unary::Abs => t.map(|v| v.abs()),
            Unary::Sqrt => t.map(|v| v.sqrt()),
            Unary::Square => t.map(|v| v * v),
            Unary::Tanh => t.map(|v| v.tanh()),
        };
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, f), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Normalizes over the leading (channel) dimension at every position.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.dim(0);
        let per = t.numel() / c;
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(eps);
        let src = t.data();
        let mut out = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); per];
        for p in 0..per {
            let mut mean = T::zero();
            for ci in 0..c {
                mean += src[ci * per + p];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for ci in 0..c {
                let d = src[ci * per + p] - mean;
                var += d * d;
            }
            let r = T::one() / (var * inv_c + eps).sqrt();
            rstd[p] = r;
            for ci in 0..c {
                out[ci * per + p] = (src[ci * per + p] - mean) * r;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm(x, rstd), ng)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax_rows(a, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked-out
    /// entries come out as exactly zero. Every row must keep at least one entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2);
        let (r, c) = (t.dim(0), t.dim(1));
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c);
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(i * c + j) && v > mx {
                    mx = v;
                }
            }
            assert!(mx > T::neg_infinity(), "softmax row {i} has no unmasked entries");
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(i * c + j) {
                    let e = (v - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[r, c], out), Op::Softmax(a), ng)
    }

    /// Scales each row of a matrix to unit Euclidean norm (norms clamped below by `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2);
        let (r, c) = (t.dim(0), t.dim(1));
        let eps = T::lit(eps);
        let mut norms = Vec::with_capacity(r);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormRows(a, norms), ng)
    }

    /// `out[i, j] = a[i] + b[j]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.numel(), tb.numel());
        let mut out = Vec::with_capacity(n * m);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x + y));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[n, m], out), Op::OuterSum(a, b), ng)
    }

    /// `p×p` window of a `[C, H, W]` map centred on column `cx`, row `cy`,
    /// reading mirrored pixels where the window leaves the frame.
    pub fn crop_reflect(&mut self, x: Var, cx: usize, cy: usize, p: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let half = (p / 2) as isize;
        let rows: Vec<usize> =
            (0..p).map(|i| reflect_index(cy as isize - half + i as isize, h)).collect();
        let cols: Vec<usize> =
            (0..p).map(|j| reflect_index(cx as isize - half + j as isize, w)).collect();
        let mut out = Vec::with_capacity(c * p * p);
        for ci in 0..c {
            for &r in &rows {
                out.extend(cols.iter().map(|&cc| t.data()[(ci * h + r) * w + cc]));
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, p, p], out), Op::Crop { x, rows, cols }, ng)
    }

    /// Mean over all trailing dimensions: `[C, ...] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.dim(0);
        let per = t.numel() / c;
        let inv = T::lit(1.0 / per as f64);
        let out: Vec<T> = t.data().chunks(per).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c], out), Op::MeanSpatial(x), ng)
    }

    /// Scatters node rows `x: [N, C]` onto a zero `[C, h, w]` map; `coords` are
    /// `(col, row)` pairs. Colliding nodes sum.
    pub fn scatter_nodes(&mut self, x: Var, coords: &[(usize, usize)], h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let (n, c) = (t.dim(0), t.dim(1));
        assert_eq!(n, coords.len(), "one coordinate per node row");
        let pixels: Vec<usize> = coords
            .iter()
            .map(|&(cx, cy)| {
                assert!(cx < w && cy < h, "node ({cx}, {cy}) outside {h}x{w}");
                cy * w + cx
            })
            .collect();
        let mut out = vec![T::zero(); c * h * w];
        for (i, &pix) in pixels.iter().enumerate() {
            for ci in 0..c {
                out[ci * h * w + pix] += t.data()[i * c + ci];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Scatter { x, pixels }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::lit(t.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `a - mean(a)`.
    pub fn sub_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::lit(t.numel() as f64);
        let out = t.map(|v| v - m);
        let ng = self.ng(a);
        self.push(out, Op::SubMean(a), ng)
    }

    /// Pearson correlation of all elements of `a` and `b`; zero when either
    /// side has zero variance.
    pub fn correlation(&mut self, a: Var, b: Var) -> Var {
        let v = correlation_parts(self.value(a), self.value(b)).0;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(v), Op::Correlation(a, b), ng)
    }

    /// Cosine similarity of the flattened tensors; zero when either is all-zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let v = cosine_parts(self.value(a), self.value(b)).0;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(v), Op::Cosine(a, b), ng)
    }

    /// Gradients of the sum of `root` with respect to every differentiable node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rs = self.value(root).shape().to_vec();
        grads[root.0] = Some(Tensor::full(&rs, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| axpy(buf, g.data(), T::one()));
                self.acc(grads, *b, |buf| axpy(buf, g.data(), T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| axpy(buf, g.data(), T::one()));
                self.acc(grads, *b, |buf| axpy(buf, g.data(), -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((o, &gv), &y) in buf.iter_mut().zip(g.data()).zip(vb) {
                        *o += gv * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g.data()).zip(va) {
                        *o += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((o, &gv), &y) in buf.iter_mut().zip(g.data()).zip(vb) {
                        *o += gv / y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g.data()).zip(va).zip(vb) {
                        *o -= gv * x / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |buf| axpy(buf, g.data(), *c)),
            Op::AddConst(a) => self.acc(grads, *a, |buf| axpy(buf, g.data(), T::one())),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                self.acc(grads, *a, |buf| axpy(buf, g.data(), sv));
                let va = self.value(*a).data();
                self.acc(grads, *s, |buf| {
                    buf[0] += g.data().iter().zip(va).map(|(&gv, &x)| gv * x).sum::<T>();
                });
            }
            Op::ChannelBias(x, b) => {
                self.acc(grads, *x, |buf| axpy(buf, g.data(), T::one()));
                let c = self.value(*b).numel();
                let per = g.numel() / c;
                self.acc(grads, *b, |buf| {
                    for (ci, ch) in g.data().chunks(per).enumerate() {
                        buf[ci] += ch.iter().copied().sum::<T>();
                    }
                });
            }
            Op::ChannelScale(x, s) => {
                let vs = self.value(*s).data();
                let vx = self.value(*x).data();
                let per = g.numel() / vs.len();
                self.acc(grads, *x, |buf| {
                    for (ci, (o, gch)) in buf.chunks_mut(per).zip(g.data().chunks(per)).enumerate() {
                        for (ov, &gv) in o.iter_mut().zip(gch) {
                            *ov += gv * vs[ci];
                        }
                    }
                });
                self.acc(grads, *s, |buf| {
                    for (ci, (gch, xch)) in g.data().chunks(per).zip(vx.chunks(per)).enumerate() {
                        buf[ci] += gch.iter().zip(xch).map(|(&gv, &xv)| gv * xv).sum::<T>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                self.acc(grads, *a, |buf| T::gemm(m, n, k, g.data(), false, tb.data(), true, buf, true));
                self.acc(grads, *b, |buf| T::gemm(k, m, n, ta.data(), true, g.data(), false, buf, true));
            }
            Op::Transpose(a) => {
                let gt = transpose2(g);
                self.acc(grads, *a, |buf| axpy(buf, gt.data(), T::one()));
            }
            Op::Reshape(a) => self.acc(grads, *a, |buf| axpy(buf, g.data(), T::one())),
            Op::Conv(x, w, spec) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cout, cin, k) = (tw.dim(0), tw.dim(1), tw.dim(2));
                let geo = Geometry::new(cin, tx.dim(1), tx.dim(2), k, *spec);
                let (gx, gw) = self.two_bufs(grads, *x, *w);
                conv::conv_backward(&geo, tx.data(), tw.data(), cout, g.data(), gw, gx);
            }
            Op::Depthwise(x, w, spec) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geo = Geometry::new(tw.dim(0), tx.dim(1), tx.dim(2), tw.dim(1), *spec);
                let (gx, gw) = self.two_bufs(grads, *x, *w);
                conv::depthwise_backward(&geo, tx.data(), tw.data(), g.data(), gw, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |buf| axpy(buf, &g.data()[off..off + n], T::one()));
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let ta = self.value(*a);
                let per = ta.numel() / ta.dim(0);
                let off = start * per;
                self.acc(grads, *a, |buf| axpy(&mut buf[off..off + g.numel()], g.data(), T::one()));
            }
            Op::Unary(a, f) => {
                let x = self.value(*a).data();
                let y = out.data();
                let gd = g.data();
                let d: Vec<T> = match *f {
                    Unary::LeakyRelu(s) => {
                        let s = T::lit(s);
                        x.iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s }).collect()
                    }
                    Unary::Elu => x
                        .iter()
                        .zip(y)
                        .zip(gd)
                        .map(|((&v, &yv), &gv)| if v > T::zero() { gv } else { gv * (yv + T::one()) })
                        .collect(),
                    Unary::Gelu => x.iter().zip(gd).map(|(&v, &gv)| gv * gelu_grad(v)).collect(),
                    Unary::Sigmoid => y.iter().zip(gd).map(|(&yv, &gv)| gv * yv * (T::one() - yv)).collect(),
                    Unary::Exp => y.iter().zip(gd).map(|(&yv, &gv)| gv * yv).collect(),
                    Unary::Abs => x.iter().zip(gd).map(|(&v, &gv)| gv * sign(v)).collect(),
                    Unary::Sqrt => y
                        .iter()
                        .zip(gd)
                        .map(|(&yv, &gv)| if yv > T::zero() { gv / (yv + yv) } else { T::zero() })
                        .collect(),
                    Unary::Square => x.iter().zip(gd).map(|(&v, &gv)| gv * (v + v)).collect(),
                    Unary::Tanh => y.iter().zip(gd).map(|(&yv, &gv)| gv * (T::one() - yv * yv)).collect(),
                };
                self.acc(grads, *a, |buf| axpy(buf, &d, T::one()));
            }
            Op::LayerNorm(x, rstd) => {
                let c = out.dim(0);
                let per = out.numel() / c;
                let inv_c = T::lit(1.0 / c as f64);
                let (y, gd) = (out.data(), g.data());
                self.acc(grads, *x, |buf| {
                    for p in 0..per {
                        let mut sg = T::zero();
                        let mut sgy = T::zero();
                        for ci in 0..c {
                            sg += gd[ci * per + p];
                            sgy += gd[ci * per + p] * y[ci * per + p];
                        }
                        for ci in 0..c {
                            let k = ci * per + p;
                            buf[k] += rstd[p] * (gd[k] - inv_c * (sg + y[k] * sgy));
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.dim(1);
                let (y, gd) = (out.data(), g.data());
                self.acc(grads, *a, |buf| {
                    for ((o, yr), gr) in buf.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&u, &v)| u * v).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::L2NormRows(a, norms) => {
                let c = out.dim(1);
                let (y, gd) = (out.data(), g.data());
                let eps_hit = |r: usize| {
                    let raw: T = self.value(*a).data()[r * c..(r + 1) * c].iter().map(|&v| v * v).sum();
                    raw.sqrt() < norms[r]
                };
                self.acc(grads, *a, |buf| {
                    for (r, ((o, yr), gr)) in buf.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)).enumerate() {
                        let n = norms[r];
                        if eps_hit(r) {
                            for (ov, &gv) in o.iter_mut().zip(gr) {
                                *ov += gv / n;
                            }
                            continue;
                        }
                        let dot: T = yr.iter().zip(gr).map(|(&u, &v)| u * v).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += (gv - yv * dot) / n;
                        }
                    }
                });
            }
            Op::OuterSum(a, b) => {
                let m = out.dim(1);
                self.acc(grads, *a, |buf| {
                    for (o, row) in buf.iter_mut().zip(g.data().chunks(m)) {
                        *o += row.iter().copied().sum::<T>();
                    }
                });
                self.acc(grads, *b, |buf| {
                    for row in g.data().chunks(m) {
                        axpy(buf, row, T::one());
                    }
                });
            }
            Op::Crop { x, rows, cols } => {
                let tx = self.value(*x);
                let (c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let p = rows.len();
                self.acc(grads, *x, |buf| {
                    for ci in 0..c {
                        for (i, &r) in rows.iter().enumerate() {
                            for (j, &cc) in cols.iter().enumerate() {
                                buf[(ci * h + r) * w + cc] += g.data()[(ci * p + i) * p + j];
                            }
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let tx = self.value(*x);
                let per = tx.numel() / tx.dim(0);
                let inv = T::lit(1.0 / per as f64);
                self.acc(grads, *x, |buf| {
                    for (ch, &gv) in buf.chunks_mut(per).zip(g.data()) {
                        ch.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::Scatter { x, pixels } => {
                let c = self.value(*x).dim(1);
                let hw = out.numel() / c;
                self.acc(grads, *x, |buf| {
                    for (i, &pix) in pixels.iter().enumerate() {
                        for ci in 0..c {
                            buf[i * c + ci] += g.data()[ci * hw + pix];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|v| *v += gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g.item() / T::lit(n as f64);
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|v| *v += gv));
            }
            Op::SubMean(a) => {
                let gm = g.sum() / T::lit(g.numel() as f64);
                self.acc(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.data()) {
                        *o += gv - gm;
                    }
                });
            }
            Op::Correlation(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (cc, sxx, syy) = correlation_parts(ta, tb);
                if sxx > T::zero() && syy > T::zero() {
                    let gv = g.item();
                    let ca = centered(ta);
                    let cb = centered(tb);
                    let den = (sxx * syy).sqrt();
                    self.acc(grads, *a, |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(&ca).zip(&cb) {
                            *o += gv * (y / den - cc * x / sxx);
                        }
                    });
                    self.acc(grads, *b, |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(&ca).zip(&cb) {
                            *o += gv * (x / den - cc * y / syy);
                        }
                    });
                }
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (cs, na2, nb2) = cosine_parts(ta, tb);
                if na2 > T::zero() && nb2 > T::zero() {
                    let gv = g.item();
                    let den = (na2 * nb2).sqrt();
                    self.acc(grads, *a, |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *o += gv * (y / den - cs * x / na2);
                        }
                    });
                    self.acc(grads, *b, |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(ta.data()).zip(tb.data()) {
                            *o += gv * (x / den - cs * y / nb2);
                        }
                    });
                }
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialised on first use)
    /// when `v` participates in differentiation.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(buf.data_mut());
    }

    fn two_bufs<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        x: Var,
        w: Var,
    ) -> (Option<&'g mut [T]>, Option<&'g mut [T]>) {
        for v in [x, w] {
            if self.ng(v) && grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(self.value(v).shape()));
            }
        }
        assert_ne!(x, w);
        let (lo, hi, x_first) = if x.0 < w.0 { (x.0, w.0, true) } else { (w.0, x.0, false) };
        let (left, right) = grads.split_at_mut(hi);
        let a = if self.ng(Var(lo)) { left[lo].as_mut().map(|t| t.data_mut()) } else { None };
        let b = if self.ng(Var(hi)) { right[0].as_mut().map(|t| t.data_mut()) } else { None };
        if x_first { (a, b) } else { (b, a) }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; `None` when it was not used on the tape or
    /// does not influence the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(id.index()).copied().flatten().and_then(|v| self.wrt(v))
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (t.dim(0), t.dim(1));
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// 0.5 · (1 + tanh(u)) is written as sigmoid(2u): one exp instead of a tanh.
fn gelu<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    x * sigmoid(u2)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let s = sigmoid(u2);
    let du2 = T::lit(2.0 * GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * du2
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn centered<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let m = t.sum() / T::lit(t.numel() as f64);
    t.data().iter().map(|&v| v - m).collect()
}

/// `(cc, sum of squared deviations of a, of b)`.
fn correlation_parts<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> (T, T, T) {
    assert_eq!(a.numel(), b.numel(), "correlation of differently sized tensors");
    let ca = centered(a);
    let cb = centered(b);
    let sxy: T = ca.iter().zip(&cb).map(|(&x, &y)| x * y).sum();
    let sxx: T = ca.iter().map(|&x| x * x).sum();
    let syy: T = cb.iter().map(|&y| y * y).sum();
    let cc = if sxx > T::zero() && syy > T::zero() { sxy / (sxx * syy).sqrt() } else { T::zero() };
    (cc, sxx, syy)
}

fn cosine_parts<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> (T, T, T) {
    assert_eq!(a.numel(), b.numel(), "cosine of differently sized tensors");
    let ab: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
    let na2 = a.norm_sq();
    let nb2 = b.norm_sq();
    let cs = if na2 > T::zero() && nb2 > T::zero() { ab / (na2 * nb2).sqrt() } else { T::zero() };
    (cs, na2, nb2)
}
