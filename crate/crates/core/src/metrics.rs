//! Fusion-quality metrics on 8-bit luminance: entropy, standard deviation,
//! spatial frequency, mutual information, sum of correlations of
//! differences, pixel-domain multi-scale VIF, edge-preservation Q^{AB/F}
//! and SSIM. Two-source scores use the usual conventions: MI is summed over
//! the sources, SCD sums both cross terms, VIF, Q^{AB/F} and SSIM average.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::image::{gaussian_kernel, Gray8};

/// Column order of the report tables.
pub const METRIC_NAMES: [&str; 8] = ["EN", "SD", "SF", "MI", "SCD", "VIF", "QABF", "SSIM"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "EN")]
    pub en: f64,
    #[serde(rename = "SD")]
    pub sd: f64,
    #[serde(rename = "SF")]
    pub sf: f64,
    #[serde(rename = "MI")]
    pub mi: f64,
    #[serde(rename = "SCD")]
    pub scd: f64,
    #[serde(rename = "VIF")]
    pub vif: f64,
    #[serde(rename = "QABF")]
    pub qabf: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
}

impl MetricReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 8] {
        [self.en, self.sd, self.sf, self.mi, self.scd, self.vif, self.qabf, self.ssim]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self { en: v[0], sd: v[1], sf: v[2], mi: v[3], scd: v[4], vif: v[5], qabf: v[6], ssim: v[7] }
    }

    /// Column-wise mean; `None` for an empty slice.
    pub fn mean(rows: &[MetricReport]) -> Option<MetricReport> {
        if rows.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }
}

/// Sigmoid constants of the edge-preservation measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QabfParams {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent applied to the source edge strength to form the weights.
    pub weight_exponent: f64,
}

impl Default for QabfParams {
    fn default() -> Self {
        Self {
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
            weight_exponent: 1.0,
        }
    }
}

impl QabfParams {
    /// Score of a pixel whose strength and orientation are both preserved
    /// perfectly; the largest value the measure can take.
    pub fn self_preservation(&self) -> f64 {
        self.preservation(1.0, 1.0)
    }

    fn preservation(&self, g: f64, a: f64) -> f64 {
        let qg = self.gamma_g / (1.0 + libm::exp(self.kappa_g * (g - self.sigma_g)));
        let qa = self.gamma_a / (1.0 + libm::exp(self.kappa_a * (a - self.sigma_a)));
        qg * qa
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VifParams {
    pub scales: usize,
    /// Variance of the additive visual-noise model.
    pub noise_variance: f64,
}

impl Default for VifParams {
    fn default() -> Self {
        Self { scales: 4, noise_variance: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub qabf: QabfParams,
    pub vif: VifParams,
}

pub const SSIM_DYNAMIC_RANGE: f64 = 255.0;

fn to_f64(img: &Gray8) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// Shannon entropy in bits of a count vector whose total is `n`.
fn entropy_of_counts(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut e = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / n;
            e -= p * libm::log2(p);
        }
    }
    e
}

fn histogram(img: &Gray8) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.data() {
        h[v as usize] += 1;
    }
    h
}

pub fn entropy(img: &Gray8) -> f64 {
    entropy_of_counts(histogram(img).into_iter(), img.data().len() as f64)
}

pub fn standard_deviation(img: &Gray8) -> f64 {
    let x = to_f64(img);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    libm::sqrt(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// `sqrt(RF² + CF²)`, each the mean squared difference of horizontally
/// (resp. vertically) adjacent pixels.
pub fn spatial_frequency(img: &Gray8) -> f64 {
    let (h, w) = img.size();
    let mut row = 0.0;
    let mut col = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) as f64;
            if x > 0 {
                let d = v - img.get(x - 1, y) as f64;
                row += d * d;
            }
            if y > 0 {
                let d = v - img.get(x, y - 1) as f64;
                col += d * d;
            }
        }
    }
    let rf = if w > 1 { row / (h * (w - 1)) as f64 } else { 0.0 };
    let cf = if h > 1 { col / ((h - 1) * w) as f64 } else { 0.0 };
    libm::sqrt(rf + cf)
}

/// `(EN, SD, SF)` of a fused image.
pub fn intensity_stats(fused: &Gray8) -> (f64, f64, f64) {
    (entropy(fused), standard_deviation(fused), spatial_frequency(fused))
}

/// Mutual information in bits from the 256×256 joint histogram, computed as
/// `H(A) + H(B) − H(A, B)`; `MI(I, I)` therefore equals `EN(I)` exactly.
pub fn mutual_information(a: &Gray8, b: &Gray8) -> f64 {
    assert_eq!(a.size(), b.size(), "mutual information needs equal sizes");
    let n = a.data().len() as f64;
    let mut joint = vec![0u64; 256 * 256];
    for (&u, &v) in a.data().iter().zip(b.data()) {
        joint[u as usize * 256 + v as usize] += 1;
    }
    let ha = entropy_of_counts(histogram(a).into_iter(), n);
    let hb = entropy_of_counts(histogram(b).into_iter(), n);
    let hab = entropy_of_counts(joint.into_iter(), n);
    (ha + hb - hab).max(0.0)
}

/// Pearson correlation; zero when either side has no variance.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / libm::sqrt(saa * sbb)
}

pub fn scd(fused: &Gray8, a: &Gray8, b: &Gray8) -> f64 {
    let (f, a, b) = (to_f64(fused), to_f64(a), to_f64(b));
    let f_minus_b: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x - y).collect();
    let f_minus_a: Vec<f64> = f.iter().zip(&a).map(|(x, y)| x - y).collect();
    correlation(&f_minus_b, &a) + correlation(&f_minus_a, &b)
}

/// `(MI, SCD)` of a fused image against both sources.
pub fn information_metrics(fused: &Gray8, a: &Gray8, b: &Gray8) -> (f64, f64) {
    check_sizes(fused, a, b);
    (mutual_information(fused, a) + mutual_information(fused, b), scd(fused, a, b))
}

/// Row-major `h×w` grid of reals.
#[derive(Clone, Debug, PartialEq)]
struct Grid {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Grid {
    fn of(img: &Gray8) -> Self {
        Self { h: img.height(), w: img.width(), v: to_f64(img) }
    }

    fn zip(&self, o: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Unpadded separable filtering with a symmetric kernel.
    fn filter_valid(&self, k: &[f64]) -> Grid {
        let n = k.len();
        let (h, w) = (self.h + 1 - n, self.w + 1 - n);
        let mut tmp = vec![0.0; self.h * w];
        for y in 0..self.h {
            for x in 0..w {
                tmp[y * w + x] = k.iter().enumerate().map(|(i, &c)| c * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = k.iter().enumerate().map(|(i, &c)| c * tmp[(y + i) * w + x]).sum();
            }
        }
        Grid { h, w, v }
    }

    /// Halves the resolution on a sample grid centred on the image, so an
    /// even extent samples half-way between pixels (pair averages). This
    /// keeps the pyramid symmetric under flips.
    fn decimate(&self) -> Grid {
        let axis = |n: usize| -> Vec<(usize, usize)> {
            if n % 2 == 1 {
                (0..n).step_by(2).map(|i| (i, i)).collect()
            } else {
                (0..n).step_by(2).map(|i| (i, i + 1)).collect()
            }
        };
        let (ys, xs) = (axis(self.h), axis(self.w));
        let mut v = Vec::with_capacity(ys.len() * xs.len());
        for &(y0, y1) in &ys {
            for &(x0, x1) in &xs {
                let at = |y: usize, x: usize| self.v[y * self.w + x];
                v.push(0.25 * (at(y0, x0) + at(y0, x1) + at(y1, x0) + at(y1, x1)));
            }
        }
        Grid { h: ys.len(), w: xs.len(), v }
    }

    fn mean(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len() as f64
    }
}

/// Local means, variances and covariance under a Gaussian window.
struct LocalStats {
    mu_a: Grid,
    mu_b: Grid,
    var_a: Grid,
    var_b: Grid,
    cov: Grid,
}

fn local_stats(a: &Grid, b: &Grid, k: &[f64]) -> LocalStats {
    let mu_a = a.filter_valid(k);
    let mu_b = b.filter_valid(k);
    let aa = a.zip(a, |x, y| x * y).filter_valid(k);
    let bb = b.zip(b, |x, y| x * y).filter_valid(k);
    let ab = a.zip(b, |x, y| x * y).filter_valid(k);
    let var_a = aa.zip(&mu_a, |s, m| s - m * m);
    let var_b = bb.zip(&mu_b, |s, m| s - m * m);
    let mut cov = ab;
    for ((c, &ma), &mb) in cov.v.iter_mut().zip(&mu_a.v).zip(&mu_b.v) {
        *c -= ma * mb;
    }
    LocalStats { mu_a, mu_b, var_a, var_b, cov }
}

/// Largest odd window no larger than `nominal` that fits an `h×w` image.
fn fitted_window(nominal: usize, h: usize, w: usize) -> usize {
    let m = nominal.min(h).min(w);
    if m % 2 == 0 {
        m.saturating_sub(1)
    } else {
        m
    }
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over valid positions;
/// the window shrinks to the largest odd size that fits small images.
pub fn ssim_pair(a: &Gray8, b: &Gray8) -> f64 {
    assert_eq!(a.size(), b.size(), "ssim needs equal sizes");
    let (h, w) = a.size();
    let n = fitted_window(crate::losses::SSIM_WINDOW, h, w);
    assert!(n >= 1, "ssim needs a non-empty image");
    let k = gaussian_kernel(crate::losses::SSIM_SIGMA, n / 2);
    let s = local_stats(&Grid::of(a), &Grid::of(b), &k);
    let c1 = (crate::losses::SSIM_K1 * SSIM_DYNAMIC_RANGE) * (crate::losses::SSIM_K1 * SSIM_DYNAMIC_RANGE);
    let c2 = (crate::losses::SSIM_K2 * SSIM_DYNAMIC_RANGE) * (crate::losses::SSIM_K2 * SSIM_DYNAMIC_RANGE);
    let mut map = s.mu_a.clone();
    for i in 0..map.v.len() {
        let (ma, mb) = (s.mu_a.v[i], s.mu_b.v[i]);
        map.v[i] = ((2.0 * ma * mb + c1) * (2.0 * s.cov.v[i] + c2))
            / ((ma * ma + mb * mb + c1) * (s.var_a.v[i] + s.var_b.v[i] + c2));
    }
    map.mean()
}

/// Pixel-domain multi-scale visual information fidelity of `distorted`
/// against `reference`. Scale `s` (1-based) uses a Gaussian window of
/// nominal size `2^(5−s)+1` with σ = size/5, clipped to the image; coarser
/// scales are low-passed with their window and decimated by two on a
/// centred grid. A scale whose image is smaller than 3 pixels is skipped
/// with a warning.
pub fn vif(reference: &Gray8, distorted: &Gray8, params: &VifParams) -> f64 {
    assert_eq!(reference.size(), distorted.size(), "vif needs equal sizes");
    let mut r = Grid::of(reference);
    let mut d = Grid::of(distorted);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=params.scales {
        let nominal = (1usize << (params.scales + 1 - scale)) + 1;
        if scale > 1 {
            let n = fitted_window(nominal, r.h, r.w);
            if n < 3 {
                log::warn!("vif: scale {scale} skipped, image {}x{} too small", r.h, r.w);
                continue;
            }
            let k = gaussian_kernel(n as f64 / 5.0, n / 2);
            r = r.filter_valid(&k).decimate();
            d = d.filter_valid(&k).decimate();
        }
        let n = fitted_window(nominal, r.h, r.w);
        if n < 3 {
            log::warn!("vif: scale {scale} skipped, image {}x{} too small", r.h, r.w);
            continue;
        }
        let k = gaussian_kernel(n as f64 / 5.0, n / 2);
        let s = local_stats(&r, &d, &k);
        for i in 0..s.cov.v.len() {
            let (n_, d_) = vif_terms(s.var_a.v[i], s.var_b.v[i], s.cov.v[i], params.noise_variance);
            num += n_;
            den += d_;
        }
    }
    if den <= 0.0 {
        // a flat reference carries no information to preserve
        return 0.0;
    }
    num / den
}

/// Per-position numerator and denominator of the VIF sum, with the usual
/// guards against vanishing or negative variances and gains.
fn vif_terms(var_r: f64, var_d: f64, cov: f64, noise: f64) -> (f64, f64) {
    const TINY: f64 = 1e-10;
    let mut var_r = var_r.max(0.0);
    let var_d = var_d.max(0.0);
    let mut g = cov / (var_r + TINY);
    let mut sv = var_d - g * cov;
    if var_r < TINY {
        g = 0.0;
        sv = var_d;
        var_r = 0.0;
    }
    if var_d < TINY {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = var_d;
        g = 0.0;
    }
    if sv <= TINY {
        sv = TINY;
    }
    let num = libm::log10(1.0 + g * g * var_r / (sv + noise));
    let den = libm::log10(1.0 + var_r / noise);
    (num, den)
}

/// Sobel gradients with mirrored borders: `(strength, orientation)` per
/// pixel, orientation in `[−π/2, π/2]`.
fn sobel_field(img: &Gray8) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = img.size();
    let at = |x: isize, y: isize| {
        img.get(crate::autograd::reflect_index(x, w), crate::autograd::reflect_index(y, h)) as f64
    };
    let mut g = vec![0.0; h * w];
    let mut a = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let sy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            g[i] = libm::sqrt(sx * sx + sy * sy);
            a[i] = if sx == 0.0 { if sy == 0.0 { 0.0 } else { FRAC_PI_2 } } else { libm::atan(sy / sx) };
        }
    }
    (g, a)
}

/// Per-pixel preservation of a source's edges in the fused image.
fn edge_preservation(src: &(Vec<f64>, Vec<f64>), fused: &(Vec<f64>, Vec<f64>), p: &QabfParams) -> Vec<f64> {
    src.0
        .iter()
        .zip(&src.1)
        .zip(fused.0.iter().zip(&fused.1))
        .map(|((&gs, &as_), (&gf, &af))| {
            let g = if gs == gf {
                1.0
            } else if gs > gf {
                gf / gs
            } else {
                gs / gf
            };
            // orientations are equivalent modulo π
            let d = libm::fabs(as_ - af);
            let d = d.min(core::f64::consts::PI - d);
            p.preservation(g, 1.0 - d / FRAC_PI_2)
        })
        .collect()
}

/// Edge-strength and orientation preservation of both sources, weighted by
/// source edge strength. Flat sources everywhere yield the
/// self-preservation score.
pub fn qabf(fused: &Gray8, a: &Gray8, b: &Gray8, p: &QabfParams) -> f64 {
    check_sizes(fused, a, b);
    let (ff, fa, fb) = (sobel_field(fused), sobel_field(a), sobel_field(b));
    let qa = edge_preservation(&fa, &ff, p);
    let qb = edge_preservation(&fb, &ff, p);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..qa.len() {
        let wa = libm::pow(fa.0[i], p.weight_exponent);
        let wb = libm::pow(fb.0[i], p.weight_exponent);
        num += qa[i] * wa + qb[i] * wb;
        den += wa + wb;
    }
    if den <= 0.0 {
        return p.self_preservation();
    }
    num / den
}

/// `(VIF, QABF, SSIM)` with VIF and SSIM averaged over the two sources.
pub fn perceptual_metrics(fused: &Gray8, a: &Gray8, b: &Gray8, config: &MetricConfig) -> (f64, f64, f64) {
    check_sizes(fused, a, b);
    let vif = 0.5 * (vif(a, fused, &config.vif) + vif(b, fused, &config.vif));
    let q = qabf(fused, a, b, &config.qabf);
    let s = 0.5 * (ssim_pair(fused, a) + ssim_pair(fused, b));
    (vif, q, s)
}

pub fn evaluate_pair(fused: &Gray8, a: &Gray8, b: &Gray8, config: &MetricConfig) -> MetricReport {
    let (en, sd, sf) = intensity_stats(fused);
    let (mi, scd) = information_metrics(fused, a, b);
    let (vif, qabf, ssim) = perceptual_metrics(fused, a, b, config);
    MetricReport { en, sd, sf, mi, scd, vif, qabf, ssim }
}

/// Sequential batch evaluation, one report per triple in input order.
pub fn evaluate_batch(triples: &[(Gray8, Gray8, Gray8)], config: &MetricConfig) -> Vec<MetricReport> {
    triples.iter().map(|(f, a, b)| evaluate_pair(f, a, b, config)).collect()
}

fn check_sizes(f: &Gray8, a: &Gray8, b: &Gray8) {
    assert!(f.size() == a.size() && a.size() == b.size(), "fused and source images differ in size");
}
