//! 8-bit PNG reading and writing for images and binary masks.

use std::fs;
use std::path::Path;

use cbff_core::{Mask, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{DataError, Result};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |source| DataError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    Ok(())
}

/// `(3, H, W)` tensor with values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f32 / 255.0
    }))
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::Size(format!("expected a (3, H, W) image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut buf = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            buf[3 * p + c] = (data[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}

/// Grayscale mask, binarized as `value > 127`.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
    Ok(Mask::new(h, w, data)?)
}

/// Written as 0/255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, buf).expect("buffer sized to mask");
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}
