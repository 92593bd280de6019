use std::path::Path;

use image::{GrayImage, RgbImage};

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extensions accepted for images, masks and field-of-view files.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

/// Mask pixels strictly above this value are vessel.
pub const MASK_THRESHOLD: u8 = 127;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB (or grayscale, replicated) image as a `3 x h x w` tensor in 0-255.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Reads a mask image and binarizes it at [`MASK_THRESHOLD`].
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::from_threshold(h, w, img.as_raw(), MASK_THRESHOLD)
}

/// Writes a mask as an 8-bit PNG with values 0 and 255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let raw = mask.data().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("mask extent matches buffer");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `3 x h x w` tensor (clamped to 0-255) as an RGB image; the
/// format follows the file extension.
pub fn write_rgb_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape("write_rgb_png", "rank", 3, image.ndim()));
    };
    if c != 3 {
        return Err(Error::shape("write_rgb_png", "channels", 3, c));
    }
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| d[(ch * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
