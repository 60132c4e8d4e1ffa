//! PNG rasters to and from `[0, 1]` tensors.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn to_tensor(img: DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0)
    } else {
        let g = img.to_luma8();
        let raw = g.as_raw();
        Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| raw[y * w + x] as f32 / 255.0)
    }
}

/// Decodes PNG bytes; grayscale files give one channel, colour files three
/// (red, green, blue). Alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = decode(bytes, Path::new("<memory>"))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Image {
            path: "<memory>".into(),
            detail: "empty image".into(),
        });
    }
    Ok(to_tensor(img))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = read(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: "empty image".into(),
        });
    }
    Ok(to_tensor(img))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

/// Writes the first batch entry of a 1- or 3-channel tensor. Values are
/// clamped to `[0, 1]` and rounded to 8 bits.
pub fn save_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    let (h, w) = (s.h() as u32, s.w() as u32);
    let img = match s.c() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
            image::Luma([quantize(t.at([0, 0, y as usize, x as usize]))])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            let px = |c| quantize(t.at([0, c, y as usize, x as usize]));
            image::Rgb([px(0), px(1), px(2)])
        })),
        c => return Err(Error::shape("save_image", "tensor", format!("{c} channels; expected 1 or 3"))),
    };
    write_png(path, img)
}

/// Writes an 8-bit RGB raster given as `h * w` pixels.
pub fn save_rgb(pixels: &[[u8; 3]], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(pixels[y as usize * w + x as usize]));
    write_png(path.as_ref(), DynamicImage::ImageRgb8(img))
}

fn gray_values(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.to_luma8().into_raw()))
}

/// Reads a label raster. With two classes, gray values `>= 128` are class 1;
/// otherwise the gray value is the class index.
pub fn load_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let (h, w, raw) = gray_values(path)?;
    let data = if num_classes == 2 {
        raw.iter().map(|&v| (v >= 128) as u32).collect()
    } else {
        raw.iter().map(|&v| v as u32).collect()
    };
    LabelMap::new(1, h, w, data)
}

/// Reads a binary mask (`>= 128` is inside).
pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let (h, w, raw) = gray_values(path.as_ref())?;
    Ok((h, w, raw.iter().map(|&v| v >= 128).collect()))
}

/// Writes class indices as gray values; two-class maps use 0 and 255.
pub fn save_labels(labels: &LabelMap, num_classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let scale = if num_classes == 2 { 255 } else { 1 };
    let img = GrayImage::from_fn(labels.w as u32, labels.h as u32, |x, y| {
        let v = labels.data[y as usize * labels.w + x as usize] * scale;
        image::Luma([v.min(255) as u8])
    });
    write_png(path.as_ref(), DynamicImage::ImageLuma8(img))
}

pub fn save_mask(mask: &[bool], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    write_png(path.as_ref(), DynamicImage::ImageLuma8(img))
}
