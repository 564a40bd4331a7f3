//! 8-bit PNG conversion for `[H, W, 3]` tensors in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};
use sphroute_core::Tensor;

use crate::error::{format_err, io_err, Result};

/// Quantises to 8 bits: `round(255 * clamp(v, 0, 1))`.
pub fn to_rgb8(img: &Tensor) -> RgbImage {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        let d = &img.data()[i..i + 3];
        Rgb([q(d[0]), q(d[1]), q(d[2])])
    })
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let data = img.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[img.height() as usize, img.width() as usize, 3], data).expect("pixel count matches shape")
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(format_err(path, format!("expected an [H, W, 3] image, got {:?}", img.shape())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    to_rgb8(img).save(path).map_err(|e| format_err(path, e))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| format_err(path, e))?.to_rgb8();
    Ok(from_rgb8(&img))
}
