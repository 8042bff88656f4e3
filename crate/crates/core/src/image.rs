//! Single-channel image planes, binary masks and luminance/chroma conversion.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::reflect_index;
use crate::tensor::{Scalar, Tensor};

/// Row-major `height × width` intensity plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "plane data length");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.size(), other.size());
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(self.width - 1 - x, y))
    }

    /// `[1, H, W]` tensor for the network.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Inverse of [`Plane::to_tensor`]; accepts `[1, H, W]` or `[H, W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(h * w, t.numel(), "single-channel tensor expected");
        Self::new(h, w, t.data().iter().map(|v| v.f64()).collect())
    }

    /// 8-bit quantization with rounding, as used by the evaluation metrics.
    pub fn quantize(&self) -> Gray8 {
        Gray8::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect(),
        )
    }

    /// Bilinear sample at fractional pixel coordinates; `fill` outside the frame.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x > -1.0 && y > -1.0 && x < w && y < h) {
            return fill;
        }
        let (x0, y0) = (libm::floor(x), libm::floor(y));
        let (fx, fy) = (x - x0, y - y0);
        let at = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
                fill
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let top = lerp(at(x0, y0), at(x0 + 1.0, y0), fx);
        let bottom = lerp(at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0), fx);
        lerp(top, bottom, fy)
    }

    /// Separable correlation with `kx` along rows and `ky` along columns
    /// (both odd length, centred), mirrored at the borders.
    pub fn filter_separable(&self, kx: &[f64], ky: &[f64]) -> Self {
        let (h, w) = self.size();
        let rx = (kx.len() / 2) as isize;
        let ry = (ky.len() / 2) as isize;
        let tmp = Self::from_fn(h, w, |x, y| {
            kx.iter()
                .enumerate()
                .map(|(i, &k)| k * self.get(reflect_index(x as isize + i as isize - rx, w), y))
                .sum()
        });
        Self::from_fn(h, w, |x, y| {
            ky.iter()
                .enumerate()
                .map(|(i, &k)| k * tmp.get(x, reflect_index(y as isize + i as isize - ry, h)))
                .sum()
        })
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let k = gaussian_kernel(sigma, libm::ceil(3.0 * sigma) as usize);
        self.filter_separable(&k, &k)
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Normalized 1-D Gaussian of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> =
        (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Binary vessel mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(height * width, data.len(), "mask data length");
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-frame coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Sørensen–Dice overlap; two empty masks score 1.
    pub fn dice(&self, other: &Mask) -> f64 {
        assert_eq!(self.size(), other.size());
        let inter = self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count();
        let total = self.count() + other.count();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Pads with `pad` background pixels on every side.
    pub fn padded(&self, pad: usize) -> Self {
        Self::from_fn(self.height + 2 * pad, self.width + 2 * pad, |x, y| {
            self.get_signed(x as isize - pad as isize, y as isize - pad as isize)
        })
    }

    /// Number of 8-connected foreground components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (x, y) = ((p % self.width) as isize, (p / self.width) as isize);
                for (dx, dy) in NEIGHBORS_8 {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.get_signed(nx, ny) {
                        let q = ny as usize * self.width + nx as usize;
                        if !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }
}

/// Offsets of the 8-neighbourhood in clockwise order starting north.
pub const NEIGHBORS_8: [(isize, isize); 8] =
    [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// 8-bit single-channel image used by the evaluation metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len(), "image data length");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.get(self.width - 1 - x, y));
            }
        }
        Self::new(self.height, self.width, data)
    }

    pub fn to_plane(&self) -> Plane {
        Plane::new(self.height, self.width, self.data.iter().map(|&v| v as f64 / 255.0).collect())
    }
}

/// Blue- and red-difference chroma planes (offset to 0.5), kept so that a
/// fused luminance can be recoloured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chroma {
    pub cb: Plane,
    pub cr: Plane,
}

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

/// Full-range BT.601 split of an RGB image (channels in `[0, 1]`).
pub fn rgb_to_luma_chroma(r: &Plane, g: &Plane, b: &Plane) -> (Plane, Chroma) {
    let (h, w) = r.size();
    assert!(g.size() == (h, w) && b.size() == (h, w));
    let mut y = Plane::filled(h, w, 0.0);
    let mut cb = Plane::filled(h, w, 0.0);
    let mut cr = Plane::filled(h, w, 0.0);
    for i in 0..h * w {
        let (rv, gv, bv) = (r.data[i], g.data[i], b.data[i]);
        let yv = KR * rv + KG * gv + KB * bv;
        y.data[i] = yv.clamp(0.0, 1.0);
        cb.data[i] = ((bv - yv) / (2.0 * (1.0 - KB)) + 0.5).clamp(0.0, 1.0);
        cr.data[i] = ((rv - yv) / (2.0 * (1.0 - KR)) + 0.5).clamp(0.0, 1.0);
    }
    (y, Chroma { cb, cr })
}

/// Inverse of [`rgb_to_luma_chroma`], clamped to `[0, 1]`.
pub fn luma_chroma_to_rgb(y: &Plane, chroma: &Chroma) -> [Plane; 3] {
    let (h, w) = y.size();
    let mut out = [Plane::filled(h, w, 0.0), Plane::filled(h, w, 0.0), Plane::filled(h, w, 0.0)];
    for i in 0..h * w {
        let yv = y.data[i];
        let cbv = chroma.cb.data[i] - 0.5;
        let crv = chroma.cr.data[i] - 0.5;
        let r = yv + 2.0 * (1.0 - KR) * crv;
        let b = yv + 2.0 * (1.0 - KB) * cbv;
        let g = (yv - KR * r - KB * b) / KG;
        out[0].data[i] = r.clamp(0.0, 1.0);
        out[1].data[i] = g.clamp(0.0, 1.0);
        out[2].data[i] = b.clamp(0.0, 1.0);
    }
    out
}
