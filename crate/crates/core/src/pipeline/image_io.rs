//! 8-bit PNG reading and writing. Pixels map to floats as `v / 255`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Nearest 8-bit level of a `[0, 1]` value.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel image as `[1,H,W]` in `[0, 1]`; colour inputs are reduced to luminance.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(&[1, h as usize, w as usize], img.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
}

/// Colour image as `[3,H,W]` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    Ok(load_rgb_levels(path)?.map(|v| v / 255.0))
}

/// Colour image as `[3,H,W]` holding the raw 8-bit levels `0..=255`.
pub fn load_rgb_levels(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn plane_dims(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == channels => Ok((h, w)),
        [h, w] if channels == 1 => Ok((h, w)),
        ref s => Err(Error::shape("save_image", format!("expected [{channels},H,W], got {s:?}"))),
    }
}

fn write_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a `[1,H,W]` (or `[H,W]`) image in `[0, 1]` as 8-bit grayscale PNG.
pub fn save_gray(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(img, 1)?;
    let buf = GrayImage::from_raw(w as u32, h as u32, img.data().iter().map(|&v| quantize(v)).collect())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| write_err(path, e))
}

/// Writes a `[3,H,W]` image in `[0, 1]` as 8-bit RGB PNG.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(img, 3)?;
    let d = img.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    buf.save(path).map_err(|e| write_err(path, e))
}
