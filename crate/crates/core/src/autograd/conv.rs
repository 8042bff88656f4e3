//! 2-D convolution kernels over `[C, H, W]` feature maps (batch size one).

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// Border handling for a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the output shrinks by `dilation * (k - 1)`.
    Valid,
    /// "Same" output size, out-of-frame taps read zero.
    Zero,
    /// "Same" output size, out-of-frame taps mirror about the border pixel.
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const fn same(dilation: usize) -> Self {
        Self { dilation, padding: Padding::Zero }
    }

    pub const fn reflect() -> Self {
        Self { dilation: 1, padding: Padding::Reflect }
    }

    pub const fn valid() -> Self {
        Self { dilation: 1, padding: Padding::Valid }
    }

    /// Output extent along one axis of length `n` for a `k`-tap kernel.
    pub fn out_len(&self, n: usize, k: usize) -> usize {
        match self.padding {
            Padding::Valid => n.saturating_sub(self.dilation * (k - 1)),
            Padding::Zero | Padding::Reflect => n,
        }
    }

    fn offset(&self, k: usize) -> isize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Zero | Padding::Reflect => (self.dilation * (k - 1) / 2) as isize,
        }
    }

    /// `map[t * out + o]` is the source index read by tap `t` at output `o`.
    fn tap_map(&self, n: usize, k: usize) -> Vec<Option<usize>> {
        let out = self.out_len(n, k);
        let off = self.offset(k);
        let mut map = Vec::with_capacity(k * out);
        for t in 0..k {
            for o in 0..out {
                let i = o as isize + (t * self.dilation) as isize - off;
                map.push(match self.padding {
                    Padding::Reflect => Some(reflect_index(i, n)),
                    _ => (i >= 0 && (i as usize) < n).then_some(i as usize),
                });
            }
        }
        map
    }
}

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). Folds repeatedly for offsets beyond one period.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) struct Geometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Geometry {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, spec: ConvSpec) -> Self {
        Self {
            cin,
            h,
            w,
            k,
            ho: spec.out_len(h, k),
            wo: spec.out_len(w, k),
            ymap: spec.tap_map(h, k),
            xmap: spec.tap_map(w, k),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.ho == self.h && self.wo == self.w
    }

    /// Unfolds one input channel into its `k·k` rows of the column matrix.
    fn im2col_channel<T: Scalar>(&self, plane: &[T], col: &mut [T], runs: &[(usize, usize, isize)]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let p = ho * wo;
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[(ky * k + kx) * p..][..p];
                let xm = &self.xmap[kx * wo..(kx + 1) * wo];
                let (lo, hi, shift) = runs[kx];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let Some(sy) = self.ymap[ky * ho + oy] else {
                        dst.iter_mut().for_each(|d| *d = T::zero());
                        continue;
                    };
                    let src = &plane[sy * self.w..(sy + 1) * self.w];
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    }
                    for ox in (0..lo).chain(hi..wo) {
                        dst[ox] = xm[ox].map_or(T::zero(), |sx| src[sx]);
                    }
                }
            }
        }
    }

    fn col2im_channel<T: Scalar>(&self, col: &[T], plane: &mut [T], runs: &[(usize, usize, isize)]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let p = ho * wo;
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[(ky * k + kx) * p..][..p];
                let xm = &self.xmap[kx * wo..(kx + 1) * wo];
                let (lo, hi, shift) = runs[kx];
                for oy in 0..ho {
                    let Some(sy) = self.ymap[ky * ho + oy] else { continue };
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        for (d, &v) in dst[s0..s0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    }
                    for ox in (0..lo).chain(hi..wo) {
                        if let Some(sx) = xm[ox] {
                            dst[sx] += src[ox];
                        }
                    }
                }
            }
        }
    }

    fn runs(&self) -> Vec<(usize, usize, isize)> {
        (0..self.k).map(|kx| linear_run(&self.xmap[kx * self.wo..(kx + 1) * self.wo])).collect()
    }
}

/// Dense convolution. `w` is `[cout, cin, k, k]`; returns `[cout, ho, wo]` data.
/// Non-pointwise kernels are unfolded one input channel at a time so the
/// column block stays cache-sized.
pub(crate) fn conv_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T], cout: usize) -> Vec<T> {
    let p = g.ho * g.wo;
    let kk = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); cout * p];
    if g.is_pointwise() {
        T::gemm(cout, kk, p, w, false, x, false, &mut out, false);
        return out;
    }
    let taps = g.k * g.k;
    let runs = g.runs();
    let mut col = vec![T::zero(); taps * p];
    for ci in 0..g.cin {
        g.im2col_channel(&x[ci * g.h * g.w..(ci + 1) * g.h * g.w], &mut col, &runs);
        T::gemm_strided(cout, taps, p, &w[ci * taps..], (kk, 1), &col, (p, 1), &mut out, (p, 1), true);
    }
    out
}

/// Accumulates weight and input gradients of a dense convolution.
pub(crate) fn conv_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    cout: usize,
    gout: &[T],
    mut gw: Option<&mut [T]>,
    mut gx: Option<&mut [T]>,
) {
    let p = g.ho * g.wo;
    let kk = g.cin * g.k * g.k;
    if g.is_pointwise() {
        if let Some(gw) = gw {
            T::gemm(cout, p, kk, gout, false, x, true, gw, true);
        }
        if let Some(gx) = gx {
            T::gemm(kk, cout, p, w, true, gout, false, gx, true);
        }
        return;
    }
    let taps = g.k * g.k;
    let runs = g.runs();
    let mut col = vec![T::zero(); taps * p];
    for ci in 0..g.cin {
        if let Some(gw) = gw.as_deref_mut() {
            g.im2col_channel(&x[ci * g.h * g.w..(ci + 1) * g.h * g.w], &mut col, &runs);
            T::gemm_strided(cout, p, taps, gout, (p, 1), &col, (1, p), &mut gw[ci * taps..], (kk, 1), true);
        }
        if let Some(gx) = gx.as_deref_mut() {
            T::gemm_strided(taps, cout, p, &w[ci * taps..], (1, kk), gout, (p, 1), &mut col, (p, 1), false);
            g.col2im_channel(&col, &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w], &runs);
        }
    }
}

/// Splits one tap's column map into a linear run `sx = ox + shift` over
/// `lo..hi` and the leftover border columns.
fn linear_run(xm: &[Option<usize>]) -> (usize, usize, isize) {
    let Some(pos) = (xm.len() / 2..xm.len()).find(|&o| xm[o].is_some()) else { return (0, 0, 0) };
    let shift = xm[pos].unwrap() as isize - pos as isize;
    let fits = |o: usize| xm[o].is_some_and(|sx| sx as isize - o as isize == shift);
    let mut lo = pos;
    while lo > 0 && fits(lo - 1) {
        lo -= 1;
    }
    let mut hi = pos + 1;
    while hi < xm.len() && fits(hi) {
        hi += 1;
    }
    (lo, hi, shift)
}

/// Per-channel convolution. `w` is `[c, k, k]`.
pub(crate) fn depthwise_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let mut out = vec![T::zero(); g.cin * ho * wo];
    let runs: Vec<_> = (0..k).map(|kx| linear_run(&g.xmap[kx * wo..(kx + 1) * wo])).collect();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let wt = w[(c * k + ky) * k + kx];
                let xm = &g.xmap[kx * wo..(kx + 1) * wo];
                let (lo, hi, shift) = runs[kx];
                for oy in 0..ho {
                    let Some(sy) = g.ymap[ky * ho + oy] else { continue };
                    let src = &plane[sy * g.w..(sy + 1) * g.w];
                    let row = &mut dst[oy * wo..(oy + 1) * wo];
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        for (d, &v) in row[lo..hi].iter_mut().zip(&src[s0..s0 + hi - lo]) {
                            *d += wt * v;
                        }
                    }
                    for ox in (0..lo).chain(hi..wo) {
                        if let Some(sx) = xm[ox] {
                            row[ox] += wt * src[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gw: Option<&mut [T]>,
    mut gx: Option<&mut [T]>,
) {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let runs: Vec<_> = (0..k).map(|kx| linear_run(&g.xmap[kx * wo..(kx + 1) * wo])).collect();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let go = &gout[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let widx = (c * k + ky) * k + kx;
                let wt = w[widx];
                let xm = &g.xmap[kx * wo..(kx + 1) * wo];
                let (lo, hi, shift) = runs[kx];
                let s0 = (lo as isize + shift) as usize;
                let mut acc = T::zero();
                for oy in 0..ho {
                    let Some(sy) = g.ymap[ky * ho + oy] else { continue };
                    let grow = &go[oy * wo..(oy + 1) * wo];
                    if gw.is_some() {
                        let src = &plane[sy * g.w..(sy + 1) * g.w];
                        if hi > lo {
                            for (&gv, &v) in grow[lo..hi].iter().zip(&src[s0..s0 + hi - lo]) {
                                acc += gv * v;
                            }
                        }
                        for ox in (0..lo).chain(hi..wo) {
                            if let Some(sx) = xm[ox] {
                                acc += grow[ox] * src[sx];
                            }
                        }
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[c * g.h * g.w + sy * g.w..][..g.w];
                        if hi > lo {
                            for (d, &gv) in dst[s0..s0 + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *d += gv * wt;
                            }
                        }
                        for ox in (0..lo).chain(hi..wo) {
                            if let Some(sx) = xm[ox] {
                                dst[sx] += grow[ox] * wt;
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[widx] += acc;
                }
            }
        }
    }
}
