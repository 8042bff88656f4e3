//! Training objectives, built on the tape so they can be differentiated.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Padding, Tape, Var};
use crate::image::gaussian_kernel;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// `alpha[0]..alpha[4]`: second reconstruction term, stage-one
    /// decomposition, graph alignment, stage-two gradient, stage-two
    /// decomposition.
    pub alpha: [f64; 5],
    /// Weight of the structural term inside the reconstruction loss.
    pub mu: f64,
    /// Offset keeping the decomposition denominator positive.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: [1.0, 2.0, 0.5, 10.0, 2.0], mu: 5.0, epsilon: 1.01 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("loss term `{0}` is not finite ({1})")]
    NonFinite(String, f64),
    #[error("invalid loss weights: {0}")]
    Weights(&'static str),
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(LossError::Weights("alpha must be non-negative"));
        }
        if !(self.epsilon > 1.0) {
            return Err(LossError::Weights("epsilon must exceed 1"));
        }
        if !(self.mu >= 0.0) {
            return Err(LossError::Weights("mu must be non-negative"));
        }
        Ok(())
    }
}

/// Per-term values plus their weighted total. Terms that were not computed
/// (the graph term when both graphs are empty) are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Parts<P> {
    pub recon1: P,
    pub recon2: P,
    pub decomp: P,
    pub graph: Option<P>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Parts<P> {
    pub intensity: P,
    pub graph: Option<P>,
    pub gradient: P,
    pub decomp: P,
}

impl<P: Copy> Stage1Parts<P> {
    fn weighted(&self, w: &LossWeights) -> Vec<(&'static str, P, f64)> {
        let mut v = alloc::vec![("recon1", self.recon1, 1.0), ("recon2", self.recon2, w.alpha[0]), ("decomp", self.decomp, w.alpha[1])];
        if let Some(g) = self.graph {
            v.push(("graph", g, w.alpha[2]));
        }
        v
    }
}

impl<P: Copy> Stage2Parts<P> {
    fn weighted(&self, w: &LossWeights) -> Vec<(&'static str, P, f64)> {
        let mut v = alloc::vec![("intensity", self.intensity, 1.0)];
        if let Some(g) = self.graph {
            v.push(("graph", g, w.alpha[2]));
        }
        v.push(("gradient", self.gradient, w.alpha[3]));
        v.push(("decomp", self.decomp, w.alpha[4]));
        v
    }
}

fn report(terms: Vec<(&'static str, f64, f64)>) -> Result<LossReport, LossError> {
    let mut map = BTreeMap::new();
    let mut total = 0.0;
    for (name, v, c) in terms {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name.to_string(), v));
        }
        total += c * v;
        map.insert(name.to_string(), v);
    }
    if !total.is_finite() {
        return Err(LossError::NonFinite("total".to_string(), total));
    }
    Ok(LossReport { total, terms: map })
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(&'static str, Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(_, v, c) in terms {
        let t = if c == 1.0 { v } else { tape.scale(v, c) };
        acc = Some(match acc {
            Some(a) => tape.add(a, t),
            None => t,
        });
    }
    acc.expect("at least one loss term")
}

/// `recon1 + a0·recon2 + a1·decomp + a2·graph`.
pub fn total_stage1(parts: &Stage1Parts<f64>, w: &LossWeights) -> Result<LossReport, LossError> {
    report(parts.weighted(w))
}

/// `intensity + a2·graph + a3·gradient + a4·decomp`.
pub fn total_stage2(parts: &Stage2Parts<f64>, w: &LossWeights) -> Result<LossReport, LossError> {
    report(parts.weighted(w))
}

pub fn stage1_objective<T: Scalar>(tape: &mut Tape<T>, parts: &Stage1Parts<Var>, w: &LossWeights) -> Var {
    weighted_sum(tape, &parts.weighted(w))
}

pub fn stage2_objective<T: Scalar>(tape: &mut Tape<T>, parts: &Stage2Parts<Var>, w: &LossWeights) -> Var {
    weighted_sum(tape, &parts.weighted(w))
}

pub fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

/// Side of the SSIM window for an `h×w` image: 11, or the largest odd size
/// that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// 2-D Gaussian SSIM window as a `[1, 1, k, k]` kernel.
pub fn ssim_kernel<T: Scalar>(k: usize) -> Tensor<T> {
    let g = gaussian_kernel(SSIM_SIGMA, k / 2);
    Tensor::from_fn(&[1, 1, k, k], |i| T::lit(g[i / k] * g[i % k]))
}

/// Mean SSIM of two `[1, H, W]` images with dynamic range `range`, over
/// valid (unpadded) Gaussian windows.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, range: f64) -> Var {
    let s = tape.shape(a).to_vec();
    assert_eq!(s.as_slice(), tape.shape(b), "ssim inputs differ in shape");
    let k = ssim_window(s[1], s[2]);
    let win = tape.constant(ssim_kernel(k));
    let spec = ConvSpec { dilation: 1, padding: Padding::Valid };
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let mu_a = tape.conv2d(a, win, spec);
    let mu_b = tape.conv2d(b, win, spec);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.conv2d(aa, win, spec);
    let e_bb = tape.conv2d(bb, win, spec);
    let e_ab = tape.conv2d(ab, win, spec);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);
    let n1 = tape.scale(mu_ab, 2.0);
    let n1 = tape.add_const(n1, c1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add_const(n2, c2);
    let d1 = tape.add(mu_aa, mu_bb);
    let d1 = tape.add_const(d1, c1);
    let d2 = tape.add(var_a, var_b);
    let d2 = tape.add_const(d2, c2);
    let num = tape.mul(n1, n2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    tape.mean(map)
}

/// `‖I − Î‖² + μ·(1 − SSIM(I, Î))`, with the squared error summed over pixels.
pub fn recon_loss<T: Scalar>(tape: &mut Tape<T>, image: Var, recon: Var, mu: f64) -> Var {
    let d = tape.sub(image, recon);
    let d2 = tape.square(d);
    let l2 = tape.sum(d2);
    let s = ssim(tape, image, recon, 1.0);
    let s = tape.scale(s, -mu);
    let s = tape.add_const(s, mu);
    tape.add(l2, s)
}

/// `CC(D1, D2)² / (CC(B1, B2) + ε)` with Pearson correlation over all elements.
pub fn decomp_loss<T: Scalar>(tape: &mut Tape<T>, base1: Var, base2: Var, detail1: Var, detail2: Var, epsilon: f64) -> Var {
    let cc_d = tape.correlation(detail1, detail2);
    let cc_b = tape.correlation(base1, base2);
    let num = tape.square(cc_d);
    let den = tape.add_const(cc_b, epsilon);
    tape.div(num, den)
}

/// `1 − cos(G1, G2)`, or `None` when both maps are entirely zero.
pub fn graph_loss<T: Scalar>(tape: &mut Tape<T>, g1: Var, g2: Var) -> Option<Var> {
    let zero = |t: &Tensor<T>| t.data().iter().all(|v| *v == T::zero());
    if zero(tape.value(g1)) && zero(tape.value(g2)) {
        return None;
    }
    let c = tape.cosine(g1, g2);
    let c = tape.scale(c, -1.0);
    Some(tape.add_const(c, 1.0))
}

fn elementwise_max<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect())
}

/// Mean absolute deviation of the fused image from the pixelwise maximum of
/// the sources (the sources are treated as constants).
pub fn stage2_intensity_loss<T: Scalar>(tape: &mut Tape<T>, fused: Var, image1: Var, image2: Var) -> Var {
    let target = elementwise_max(tape.value(image1), tape.value(image2));
    let target = tape.constant(target);
    let d = tape.sub(fused, target);
    let d = tape.abs(d);
    tape.mean(d)
}

/// Sobel x and y kernels stacked as `[2, 1, 3, 3]` (cross-correlation).
pub fn sobel_kernels<T: Scalar>() -> Tensor<T> {
    const K: [f64; 18] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    Tensor::from_fn(&[2, 1, 3, 3], |i| T::lit(K[i]))
}

/// Sobel gradient magnitude `sqrt(gx² + gy²)` of a `[1, H, W]` image, with
/// mirrored borders.
pub fn sobel_magnitude<T: Scalar>(tape: &mut Tape<T>, image: Var) -> Var {
    let k = tape.constant(sobel_kernels());
    let g = tape.conv2d(image, k, ConvSpec::reflect());
    let g2 = tape.square(g);
    let gx = tape.slice(g2, 0, 1);
    let gy = tape.slice(g2, 1, 1);
    let s = tape.add(gx, gy);
    tape.sqrt(s)
}

/// `mean | |∇I_f| − max(|∇I_1|, |∇I_2|) |` with Sobel gradients.
pub fn grad_loss<T: Scalar>(tape: &mut Tape<T>, fused: Var, image1: Var, image2: Var) -> Var {
    let gf = sobel_magnitude(tape, fused);
    let g1 = sobel_magnitude(tape, image1);
    let g2 = sobel_magnitude(tape, image2);
    let target = elementwise_max(tape.value(g1), tape.value(g2));
    let target = tape.constant(target);
    let d = tape.sub(gf, target);
    let d = tape.abs(d);
    tape.mean(d)
}
