//! Registered image pairs, geometric augmentation, resizing and the synthetic
//! vessel-tree generator.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{lerp, Chroma, Mask, Plane};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("images are not registered: {0}x{1} vs {2}x{3}")]
    Registration(usize, usize, usize, usize),
    #[error("{what} is {got_h}x{got_w}, expected {h}x{w}")]
    Shape { what: &'static str, got_h: usize, got_w: usize, h: usize, w: usize },
    #[error("{0} has intensities outside [0, 1]")]
    Range(&'static str),
    #[error("rotation {0} degrees outside [-8, 8]")]
    Rotation(f64),
    #[error("translation ({0}, {1}) outside [-20, 20]")]
    Translation(i32, i32),
    #[error("invalid synthetic scene: {0}")]
    Scene(&'static str),
}

/// Two pre-registered modalities of the same scene, single-channel luminance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisteredPair {
    pub id: String,
    pub image1: Plane,
    pub image2: Plane,
    pub chroma1: Option<Chroma>,
    pub chroma2: Option<Chroma>,
    pub mask1: Option<Mask>,
    pub mask2: Option<Mask>,
}

impl RegisteredPair {
    /// Builds a pair without masks or chroma, checking registration and range.
    pub fn new(id: impl Into<String>, image1: Plane, image2: Plane) -> Result<Self, DataError> {
        let pair = Self { id: id.into(), image1, image2, chroma1: None, chroma2: None, mask1: None, mask2: None };
        pair.validate()?;
        Ok(pair)
    }

    pub fn with_masks(mut self, mask1: Option<Mask>, mask2: Option<Mask>) -> Result<Self, DataError> {
        self.mask1 = mask1;
        self.mask2 = mask2;
        self.validate()?;
        Ok(self)
    }

    pub fn size(&self) -> (usize, usize) {
        self.image1.size()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.image1.size();
        let (h2, w2) = self.image2.size();
        if (h, w) != (h2, w2) {
            return Err(DataError::Registration(h, w, h2, w2));
        }
        let check = |what, s: (usize, usize)| {
            if s != (h, w) {
                Err(DataError::Shape { what, got_h: s.0, got_w: s.1, h, w })
            } else {
                Ok(())
            }
        };
        for (what, c) in [("chroma1", &self.chroma1), ("chroma2", &self.chroma2)] {
            if let Some(c) = c {
                check(what, c.cb.size())?;
                check(what, c.cr.size())?;
            }
        }
        for (what, m) in [("mask1", &self.mask1), ("mask2", &self.mask2)] {
            if let Some(m) = m {
                check(what, m.size())?;
            }
        }
        for (what, p) in [("image1", &self.image1), ("image2", &self.image2)] {
            if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DataError::Range(what));
            }
        }
        Ok(())
    }

    fn map_all(
        &self,
        image: impl Fn(&Plane, f64) -> Plane,
        mask: impl Fn(&Mask) -> Mask,
    ) -> Self {
        let chroma = |c: &Chroma| Chroma { cb: image(&c.cb, 0.5), cr: image(&c.cr, 0.5) };
        Self {
            id: self.id.clone(),
            image1: image(&self.image1, 0.0),
            image2: image(&self.image2, 0.0),
            chroma1: self.chroma1.as_ref().map(chroma),
            chroma2: self.chroma2.as_ref().map(chroma),
            mask1: self.mask1.as_ref().map(&mask),
            mask2: self.mask2.as_ref().map(&mask),
        }
    }
}

pub const MAX_ROTATION_DEGREES: f64 = 8.0;
pub const MAX_TRANSLATION_PX: i32 = 20;

/// One concrete geometric transform: optional horizontal flip, then rotation
/// about the image centre, then translation (positive moves content right
/// and down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    horizontal_flip: bool,
    rotation_degrees: f64,
    translation_px: (i32, i32),
}

impl AugmentationSpec {
    pub fn new(horizontal_flip: bool, rotation_degrees: f64, translation_px: (i32, i32)) -> Result<Self, DataError> {
        if !(rotation_degrees.abs() <= MAX_ROTATION_DEGREES) {
            return Err(DataError::Rotation(rotation_degrees));
        }
        let (tx, ty) = translation_px;
        if tx.abs() > MAX_TRANSLATION_PX || ty.abs() > MAX_TRANSLATION_PX {
            return Err(DataError::Translation(tx, ty));
        }
        Ok(Self { horizontal_flip, rotation_degrees, translation_px })
    }

    pub fn identity() -> Self {
        Self { horizontal_flip: false, rotation_degrees: 0.0, translation_px: (0, 0) }
    }

    /// Draws a transform uniformly from the allowed ranges.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            horizontal_flip: rng.random_bool(0.5),
            rotation_degrees: rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
            translation_px: (
                rng.random_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX),
                rng.random_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX),
            ),
        }
    }

    pub fn horizontal_flip(&self) -> bool {
        self.horizontal_flip
    }

    pub fn rotation_degrees(&self) -> f64 {
        self.rotation_degrees
    }

    pub fn translation_px(&self) -> (i32, i32) {
        self.translation_px
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.rotation_degrees == 0.0 && self.translation_px == (0, 0)
    }

    /// Source coordinate sampled by output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (dx, dy) = (x - self.translation_px.0 as f64 - cx, y - self.translation_px.1 as f64 - cy);
        let t = self.rotation_degrees.to_radians();
        let (s, c) = (libm::sin(t), libm::cos(t));
        // inverse rotation
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        if self.horizontal_flip {
            (w as f64 - 1.0 - sx, sy)
        } else {
            (sx, sy)
        }
    }
}

/// Applies one shared transform to both images, both masks and any chroma.
/// Images are resampled bilinearly, masks by nearest neighbour; pixels that
/// come from outside the frame are 0 (chroma: neutral 0.5).
pub fn augment(pair: &RegisteredPair, spec: &AugmentationSpec) -> RegisteredPair {
    if spec.is_identity() {
        return pair.clone();
    }
    let (h, w) = pair.size();
    let exact = spec.rotation_degrees == 0.0;
    pair.map_all(
        |p, fill| {
            Plane::from_fn(h, w, |x, y| {
                let (sx, sy) = spec.source(x as f64, y as f64, w, h);
                if exact {
                    let (sx, sy) = (libm::round(sx) as isize, libm::round(sy) as isize);
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        fill
                    } else {
                        p.get(sx as usize, sy as usize)
                    }
                } else {
                    p.sample_bilinear(sx, sy, fill).clamp(0.0, 1.0)
                }
            })
        },
        |m| {
            Mask::from_fn(h, w, |x, y| {
                let (sx, sy) = spec.source(x as f64, y as f64, w, h);
                m.get_signed(libm::round(sx) as isize, libm::round(sy) as isize)
            })
        },
    )
}

/// Bilinear (half-pixel aligned) resize of images and chroma, nearest
/// neighbour for masks.
pub fn resize_pair(pair: &RegisteredPair, target: (usize, usize)) -> RegisteredPair {
    let (th, tw) = target;
    assert!(th > 0 && tw > 0, "target size must be positive");
    if pair.size() == target {
        return pair.clone();
    }
    pair.map_all(|p, _| resize_plane(p, target), |m| resize_mask(m, target))
}

fn source_coord(i: usize, from: usize, to: usize) -> f64 {
    ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, from as f64 - 1.0)
}

pub fn resize_plane(p: &Plane, (th, tw): (usize, usize)) -> Plane {
    let (h, w) = p.size();
    let xs: Vec<(usize, usize, f64)> = (0..tw)
        .map(|x| {
            let s = source_coord(x, w, tw);
            let x0 = libm::floor(s) as usize;
            (x0, (x0 + 1).min(w - 1), s - x0 as f64)
        })
        .collect();
    Plane::from_fn(th, tw, |x, y| {
        let s = source_coord(y, h, th);
        let y0 = libm::floor(s) as usize;
        let (y1, fy) = ((y0 + 1).min(h - 1), s - y0 as f64);
        let (x0, x1, fx) = xs[x];
        let top = lerp(p.get(x0, y0), p.get(x1, y0), fx);
        let bottom = lerp(p.get(x0, y1), p.get(x1, y1), fx);
        lerp(top, bottom, fy).clamp(0.0, 1.0)
    })
}

pub fn resize_mask(m: &Mask, (th, tw): (usize, usize)) -> Mask {
    let (h, w) = m.size();
    let near = |i: usize, from: usize, to: usize| ((i * 2 + 1) * from / (2 * to)).min(from - 1);
    Mask::from_fn(th, tw, |x, y| m.get(near(x, w, tw), near(y, h, th)))
}

/// Appearance of one modality in a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastProfile {
    pub background: f64,
    pub vessel: f64,
    /// Peak-to-peak amplitude of smooth background shading.
    pub shading: f64,
    pub blur_sigma: f64,
    pub noise_std: f64,
    /// Bright disc added around the tree root (0 disables).
    pub disc: f64,
}

impl ContrastProfile {
    /// Dark vessels on a bright background with a visible disc, colour-fundus-like.
    pub fn fundus() -> Self {
        Self { background: 0.55, vessel: 0.22, shading: 0.2, blur_sigma: 0.7, noise_std: 0.015, disc: 0.3 }
    }

    /// Bright vessels on a dark background, angiography-like.
    pub fn angiography() -> Self {
        Self { background: 0.18, vessel: 0.85, shading: 0.1, blur_sigma: 0.5, noise_std: 0.02, disc: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// `(height, width)`.
    pub size: (usize, usize),
    pub vessel_tree_depth: usize,
    pub contrast_profile_1: ContrastProfile,
    pub contrast_profile_2: ContrastProfile,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(size: (usize, usize), vessel_tree_depth: usize, seed: u64) -> Self {
        Self {
            size,
            vessel_tree_depth,
            contrast_profile_1: ContrastProfile::fundus(),
            contrast_profile_2: ContrastProfile::angiography(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.vessel_tree_depth == 0 {
            return Err(DataError::Scene("vessel tree depth must be at least 1"));
        }
        if self.size.0 < 16 || self.size.1 < 16 {
            return Err(DataError::Scene("scene must be at least 16x16"));
        }
        Ok(())
    }
}

/// Straight vessel piece with a constant radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub radius: f64,
}

impl Segment {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = self.from;
        let (bx, by) = self.to;
        let (vx, vy) = (bx - ax, by - ay);
        let len2 = vx * vx + vy * vy;
        let t = if len2 == 0.0 { 0.0 } else { (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0) };
        let (px, py) = (ax + t * vx - x, ay + t * vy - y);
        libm::sqrt(px * px + py * py)
    }
}

/// Binary branching tree: the root segment enters from the left edge and
/// every segment below the maximum depth forks into two children.
pub fn vessel_tree<R: Rng + ?Sized>(size: (usize, usize), depth: usize, rng: &mut R) -> Vec<Segment> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let margin = 3.0;
    let start = (margin, h * rng.random_range(0.4..0.6));
    let length = w * rng.random_range(0.5..0.6) / (1.0 + 0.35 * (depth as f64 - 1.0)).max(1.0);
    let length = if depth == 1 { w * rng.random_range(0.7..0.85) } else { length };
    let radius = (h.min(w) / 28.0).clamp(1.5, 4.0);
    let mut segments = Vec::new();
    grow(&mut segments, start, rng.random_range(-0.15..0.15), length, radius, depth, (w, h), rng);
    segments
}

#[allow(clippy::too_many_arguments)]
fn grow<R: Rng + ?Sized>(
    out: &mut Vec<Segment>,
    from: (f64, f64),
    angle: f64,
    length: f64,
    radius: f64,
    depth: usize,
    (w, h): (f64, f64),
    rng: &mut R,
) {
    let margin = radius + 2.0;
    let to = (
        (from.0 + length * libm::cos(angle)).clamp(margin, w - 1.0 - margin),
        (from.1 + length * libm::sin(angle)).clamp(margin, h - 1.0 - margin),
    );
    out.push(Segment { from, to, radius });
    if depth <= 1 {
        return;
    }
    let spread = rng.random_range(0.45..0.7);
    let next_len = length * rng.random_range(0.65..0.8);
    let next_radius = (radius * 0.8).max(1.2);
    grow(out, to, angle - spread, next_len, next_radius, depth - 1, (w, h), rng);
    grow(out, to, angle + spread, next_len, next_radius, depth - 1, (w, h), rng);
}

fn render(
    size: (usize, usize),
    segments: &[Segment],
    profile: &ContrastProfile,
    shading_phase: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Plane {
    let (h, w) = size;
    let root = segments[0].from;
    let disc_r = 0.12 * h.min(w) as f64;
    let clean = Plane::from_fn(h, w, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let shade = 0.5
            * profile.shading
            * libm::sin(core::f64::consts::PI * (xf / w as f64 + shading_phase.0))
            * libm::cos(core::f64::consts::PI * (yf / h as f64 + shading_phase.1));
        let d2 = (xf - root.0) * (xf - root.0) + (yf - root.1) * (yf - root.1);
        let disc = profile.disc * libm::exp(-d2 / (2.0 * disc_r * disc_r));
        let bg = profile.background + shade + disc;
        let d = segments.iter().map(|s| s.distance(xf, yf) - s.radius).fold(f64::INFINITY, f64::min);
        // antialiased coverage over one pixel
        let cover = (0.5 - d).clamp(0.0, 1.0);
        lerp(bg, profile.vessel, cover)
    });
    let mut img = clean.gaussian_blur(profile.blur_sigma);
    if profile.noise_std > 0.0 {
        let noise = Normal::new(0.0, profile.noise_std).expect("finite noise");
        img.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    img.clamp01()
}

/// Renders one vessel tree in two modalities. The ground-truth mask (pixels
/// within a vessel radius of the centre line) is shared by both.
pub fn generate_synthetic_pair(spec: &SyntheticSceneSpec) -> Result<RegisteredPair, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let segments = vessel_tree(spec.size, spec.vessel_tree_depth, &mut rng);
    let (h, w) = spec.size;
    let mask = Mask::from_fn(h, w, |x, y| {
        segments.iter().any(|s| s.distance(x as f64, y as f64) <= s.radius)
    });
    let phase = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let image1 = render(spec.size, &segments, &spec.contrast_profile_1, phase, &mut rng);
    let image2 = render(spec.size, &segments, &spec.contrast_profile_2, (phase.1, phase.0), &mut rng);
    let id = alloc::format!("synth-{}", spec.seed);
    RegisteredPair::new(id, image1, image2)?.with_masks(Some(mask.clone()), Some(mask))
}
