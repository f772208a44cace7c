//! Binary PPM images. Pixel values live in [-1, 1] inside the library and
//! map linearly onto 0..=255 on disk.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmSubtype, SampleEncoding};
use image::{ImageFormat, Rgb, RgbImage};

use mtu_core::{Error, Float, Tensor};

use crate::error::CliError;

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

/// `[3, H, W]` values to an 8-bit image.
pub fn to_rgb<F: Float>(img: &[F], size: usize) -> Result<RgbImage, CliError> {
    if img.len() != 3 * size * size {
        return Err(CliError::Data(format!("{} values do not form a 3x{size}x{size} image", img.len())));
    }
    let plane = size * size;
    Ok(RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = y as usize * size + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(img[c * plane + p].as_f64())))
    }))
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    let enc = image::codecs::pnm::PnmEncoder::new(&mut bytes).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    img.write_with_encoder(enc).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(bytes)
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    Ok(mtu_core::io::write_atomic(path, &encode_ppm(img)?)?)
}

/// Reads a PPM into `[3, H, W]` values in [-1, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = p[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Tiles equally sized images into a near-square grid with a 1-pixel gray gutter.
pub fn grid(images: &[RgbImage]) -> Result<RgbImage, CliError> {
    let first = images.first().ok_or_else(|| CliError::Data("no images to tile".into()))?;
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(CliError::Data("grid images differ in size".into()));
    }
    let cols = (images.len() as f64).sqrt().ceil() as u32;
    let rows = (images.len() as u32).div_ceil(cols);
    let mut out = RgbImage::from_pixel(cols * (w + 1) + 1, rows * (h + 1) + 1, Rgb([128, 128, 128]));
    for (i, img) in images.iter().enumerate() {
        let (gx, gy) = (i as u32 % cols, i as u32 / cols);
        image::imageops::replace(&mut out, img, (1 + gx * (w + 1)) as i64, (1 + gy * (h + 1)) as i64);
    }
    Ok(out)
}
