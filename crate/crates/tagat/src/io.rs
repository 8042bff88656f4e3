//! Reading and writing images, masks and registered pairs.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use tagat_core::data::{DataError, RegisteredPair};
use tagat_core::image::{luma_chroma_to_rgb, rgb_to_luma_chroma, Chroma, Gray8, Mask, Plane};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot decode {path}: {source}")]
    Format { path: PathBuf, source: image::ImageError },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Registration { path: PathBuf, source: DataError },
}

/// Bit depth of a decoded image, used to scale samples to `[0, 1]`.
fn is_wide(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() > 1
}

/// Luminance in `[0, 1]`, plus chroma planes for colour images. 16-bit
/// samples are divided by 65535, 8-bit by 255; floating-point images are
/// clamped.
pub fn decode_luma(img: &DynamicImage) -> (Plane, Option<Chroma>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if !img.color().has_color() {
        let data = if is_wide(img) {
            img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        } else {
            img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        };
        return (Plane::new(h, w, data), None);
    }
    let rgb: Vec<f64> = if is_wide(img) {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    let channel = |c: usize| Plane::new(h, w, rgb.iter().skip(c).step_by(3).map(|v| v.clamp(0.0, 1.0)).collect());
    let (y, chroma) = rgb_to_luma_chroma(&channel(0), &channel(1), &channel(2));
    (y, Some(chroma))
}

fn open(path: &Path) -> Result<DynamicImage, IoError> {
    image::open(path).map_err(|source| IoError::Format { path: path.into(), source })
}

pub fn load_luma(path: &Path) -> Result<(Plane, Option<Chroma>), IoError> {
    Ok(decode_luma(&open(path)?))
}

/// Binary mask: any sample above half range is vessel.
pub fn load_mask(path: &Path) -> Result<Mask, IoError> {
    let (plane, _) = load_luma(path)?;
    let (h, w) = plane.size();
    Ok(Mask::new(h, w, plane.data().iter().map(|&v| v > 0.5).collect()))
}

/// Loads two registered images and their optional masks.
pub fn load_pair(
    id: &str,
    image1: &Path,
    image2: &Path,
    mask1: Option<&Path>,
    mask2: Option<&Path>,
) -> Result<RegisteredPair, IoError> {
    let (y1, c1) = load_luma(image1)?;
    let (y2, c2) = load_luma(image2)?;
    let m1 = mask1.map(load_mask).transpose()?;
    let m2 = mask2.map(load_mask).transpose()?;
    let reg = |source| IoError::Registration { path: image2.into(), source };
    let mut pair = RegisteredPair::new(id, y1, y2).map_err(reg)?;
    pair.chroma1 = c1;
    pair.chroma2 = c2;
    pair.with_masks(m1, m2).map_err(reg)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn plane_to_image(p: &Plane) -> GrayImage {
    let (h, w) = p.size();
    ImageBuffer::from_raw(w as u32, h as u32, p.data().iter().map(|&v| to_u8(v)).collect()).expect("buffer size")
}

pub fn gray8_from_image(img: &GrayImage) -> Gray8 {
    Gray8::new(img.height() as usize, img.width() as usize, img.as_raw().clone())
}

/// 8-bit grey image as the metrics see it.
pub fn load_gray8(path: &Path) -> Result<Gray8, IoError> {
    let (y, _) = load_luma(path)?;
    Ok(y.quantize())
}

fn save(img: DynamicImage, path: &Path) -> Result<(), IoError> {
    img.save(path).map_err(|source| IoError::Write { path: path.into(), source })
}

/// Writes an 8-bit image; with chroma the luminance is recoloured to RGB.
pub fn save_plane(path: &Path, p: &Plane, chroma: Option<&Chroma>) -> Result<(), IoError> {
    let Some(chroma) = chroma else {
        return save(DynamicImage::ImageLuma8(plane_to_image(p)), path);
    };
    let (h, w) = p.size();
    let rgb = luma_chroma_to_rgb(p, chroma);
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = Rgb([to_u8(rgb[0].data()[i]), to_u8(rgb[1].data()[i]), to_u8(rgb[2].data()[i])]);
    }
    save(DynamicImage::ImageRgb8(buf), path)
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<(), IoError> {
    let (h, w) = m.size();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, m.data().iter().map(|&v| if v { 255 } else { 0 }).collect())
            .expect("buffer size");
    save(DynamicImage::ImageLuma8(buf), path)
}

/// The chroma to reattach to a fused luminance: the colour modality's, or
/// the first one's when both are colour.
pub fn output_chroma(pair: &RegisteredPair) -> Option<&Chroma> {
    pair.chroma1.as_ref().or(pair.chroma2.as_ref())
}
