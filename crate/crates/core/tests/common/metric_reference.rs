//! Clean-room metric references. Everything here works on nested Vecs with
//! direct 2-D loops and shares no code with the library.

use std::collections::HashMap;
use std::f64::consts::PI;

use tagat_core::image::Gray8;

pub type Img = Vec<Vec<f64>>;

pub fn entropy(a: &Img) -> f64 {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    let mut n = 0usize;
    for row in a {
        for &v in row {
            *counts.entry(v as i64).or_default() += 1;
            n += 1;
        }
    }
    let mut keys: Vec<_> = counts.keys().copied().collect();
    keys.sort();
    keys.iter().map(|k| counts[k] as f64 / n as f64).map(|p| -p * p.ln() / 2f64.ln()).sum()
}

pub fn sd(a: &Img) -> f64 {
    let all: Vec<f64> = a.iter().flatten().copied().collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
}

pub fn sf(a: &Img) -> f64 {
    let (h, w) = (a.len(), a[0].len());
    let mut rf = 0.0;
    for row in a {
        for x in 1..w {
            rf += (row[x] - row[x - 1]).powi(2);
        }
    }
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            cf += (a[y][x] - a[y - 1][x]).powi(2);
        }
    }
    (rf / (h * (w - 1)) as f64 + cf / ((h - 1) * w) as f64).sqrt()
}

pub fn mi(a: &Img, b: &Img) -> f64 {
    let mut joint: HashMap<(i64, i64), f64> = HashMap::new();
    let mut pa: HashMap<i64, f64> = HashMap::new();
    let mut pb: HashMap<i64, f64> = HashMap::new();
    let n = (a.len() * a[0].len()) as f64;
    for (ra, rb) in a.iter().zip(b) {
        for (&u, &v) in ra.iter().zip(rb) {
            *joint.entry((u as i64, v as i64)).or_default() += 1.0 / n;
            *pa.entry(u as i64).or_default() += 1.0 / n;
            *pb.entry(v as i64).or_default() += 1.0 / n;
        }
    }
    joint.iter().map(|(&(u, v), &p)| p * (p / (pa[&u] * pb[&v])).log2()).sum()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let cov = sxy - sx * sy / n;
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 1e-9 || vy <= 1e-9 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub fn scd(f: &Img, a: &Img, b: &Img) -> f64 {
    let flat = |m: &Img| m.iter().flatten().copied().collect::<Vec<f64>>();
    let (f, a, b) = (flat(f), flat(a), flat(b));
    let d1: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x - y).collect();
    let d2: Vec<f64> = f.iter().zip(&a).map(|(x, y)| x - y).collect();
    pearson(&d1, &a) + pearson(&d2, &b)
}

fn window(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (n / 2) as f64;
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect())
        .collect();
    let z: f64 = w.iter().flatten().sum();
    w.iter_mut().flatten().for_each(|v| *v /= z);
    w
}

fn fit(n: usize, h: usize, w: usize) -> usize {
    let m = n.min(h).min(w);
    if m % 2 == 0 { m - 1 } else { m }
}

/// Windowed (mean_a, mean_b, var_a, var_b, cov) at every valid position.
fn stats(a: &Img, b: &Img, win: &[Vec<f64>]) -> Vec<[f64; 5]> {
    let n = win.len();
    let (h, w) = (a.len(), a[0].len());
    let mut out = Vec::new();
    for y in 0..=h - n {
        for x in 0..=w - n {
            let mut s = [0.0; 5];
            for i in 0..n {
                for j in 0..n {
                    let (u, v, k) = (a[y + i][x + j], b[y + i][x + j], win[i][j]);
                    s[0] += k * u;
                    s[1] += k * v;
                    s[2] += k * u * u;
                    s[3] += k * v * v;
                    s[4] += k * u * v;
                }
            }
            out.push([s[0], s[1], s[2] - s[0] * s[0], s[3] - s[1] * s[1], s[4] - s[0] * s[1]]);
        }
    }
    out
}

pub fn ssim(a: &Img, b: &Img) -> f64 {
    let n = fit(11, a.len(), a[0].len());
    let st = stats(a, b, &window(n, 1.5));
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    st.iter()
        .map(|s| ((2.0 * s[0] * s[1] + c1) * (2.0 * s[4] + c2)) / ((s[0].powi(2) + s[1].powi(2) + c1) * (s[2] + s[3] + c2)))
        .sum::<f64>()
        / st.len() as f64
}

fn blur_valid(a: &Img, win: &[Vec<f64>]) -> Img {
    let n = win.len();
    let (h, w) = (a.len(), a[0].len());
    (0..=h - n)
        .map(|y| {
            (0..=w - n)
                .map(|x| (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| win[i][j] * a[y + i][x + j]).sum())
                .collect()
        })
        .collect()
}

pub fn vif(r: &Img, d: &Img) -> f64 {
    let (mut r, mut d) = (r.clone(), d.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let nominal = 2usize.pow(5 - scale) + 1;
        if scale > 1 {
            if r.len() < 3 || r[0].len() < 3 {
                continue;
            }
            let n = fit(nominal, r.len(), r[0].len());
            let win = window(n, n as f64 / 5.0);
            let half = |m: Img| -> Img {
                // centred half-resolution grid: odd extents keep even
                // indices, even extents average neighbouring pairs
                let pick = |n: usize| -> Vec<Vec<usize>> {
                    (0..n).step_by(2).map(|i| if n % 2 == 1 { vec![i] } else { vec![i, i + 1] }).collect()
                };
                let (ys, xs) = (pick(m.len()), pick(m[0].len()));
                ys.iter()
                    .map(|ry| {
                        xs.iter()
                            .map(|rx| {
                                let cells: Vec<f64> = ry.iter().flat_map(|&y| rx.iter().map(move |&x| (y, x))).map(|(y, x)| m[y][x]).collect();
                                cells.iter().sum::<f64>() / cells.len() as f64
                            })
                            .collect()
                    })
                    .collect()
            };
            r = half(blur_valid(&r, &win));
            d = half(blur_valid(&d, &win));
        }
        if r.len() < 3 || r[0].len() < 3 {
            continue;
        }
        let n = fit(nominal, r.len(), r[0].len());
        for s in stats(&r, &d, &window(n, n as f64 / 5.0)) {
            let (mut s1, s2, s12) = (s[2].max(0.0), s[3].max(0.0), s[4]);
            let mut g = s12 / (s1 + 1e-10);
            let mut sv = s2 - g * s12;
            if s1 < 1e-10 {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(1e-10);
            num += (1.0 + g * g * s1 / (sv + 2.0)).log10();
            den += (1.0 + s1 / 2.0).log10();
        }
    }
    if den == 0.0 { 0.0 } else { num / den }
}

fn mirror(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn sobel(a: &Img) -> Vec<(f64, f64, f64)> {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let (h, w) = (a.len() as i64, a[0].len() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = a[mirror(y + i - 1, h)][mirror(x + j - 1, w)];
                    gx += KX[i as usize][j as usize] * v;
                    gy += KX[j as usize][i as usize] * v;
                }
            }
            out.push((gx, gy, gx.hypot(gy)));
        }
    }
    out
}

/// Orientation of a gradient as a line direction in [0, π).
fn line_angle(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 && gy == 0.0 {
        return 0.0;
    }
    gy.atan2(gx).rem_euclid(PI)
}

pub fn qabf(f: &Img, a: &Img, b: &Img) -> f64 {
    let (sf, sa, sb) = (sobel(f), sobel(a), sobel(b));
    let q = |s: (f64, f64, f64), t: (f64, f64, f64)| {
        let g = if s.2 == t.2 { 1.0 } else { s.2.min(t.2) / s.2.max(t.2) };
        let d = (line_angle(s.0, s.1) - line_angle(t.0, t.1)).abs();
        let d = d.min(PI - d);
        let alpha = 1.0 - d / (PI / 2.0);
        0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp()) * 0.9879 / (1.0 + (-22.0 * (alpha - 0.8)).exp())
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..sf.len() {
        num += q(sa[i], sf[i]) * sa[i].2 + q(sb[i], sf[i]) * sb[i].2;
        den += sa[i].2 + sb[i].2;
    }
    num / den
}

pub fn as_rows(img: &Gray8) -> Img {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(x, y) as f64).collect()).collect()
}

/// All eight scores of a fused image in the usual column order.
pub fn all(f: &Gray8, a: &Gray8, b: &Gray8) -> [f64; 8] {
    let (rf, ra, rb) = (as_rows(f), as_rows(a), as_rows(b));
    [
        entropy(&rf),
        sd(&rf),
        sf(&rf),
        mi(&rf, &ra) + mi(&rf, &rb),
        scd(&rf, &ra, &rb),
        0.5 * (vif(&ra, &rf) + vif(&rb, &rf)),
        qabf(&rf, &ra, &rb),
        0.5 * (ssim(&rf, &ra) + ssim(&rf, &rb)),
    ]
}
