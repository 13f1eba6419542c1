//! 8-bit PNG conversion for color images and masks.

use std::io::Cursor;

use image::{DynamicImage, GrayImage as Gray8, ImageFormat, RgbImage};

use crate::image::{GrayImage, ImageBuffer};

pub type PngError = image::ImageError;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: DynamicImage) -> Result<Vec<u8>, PngError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_rgb(img: &ImageBuffer) -> Result<Vec<u8>, PngError> {
    let bytes = img.values().iter().map(|v| quantize(*v)).collect();
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer length matches dimensions");
    encode(DynamicImage::ImageRgb8(rgb))
}

pub fn encode_gray(img: &GrayImage) -> Result<Vec<u8>, PngError> {
    let bytes = img.values().iter().map(|v| quantize(*v)).collect();
    let g = Gray8::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer length matches dimensions");
    encode(DynamicImage::ImageLuma8(g))
}

fn decode(bytes: &[u8]) -> Result<DynamicImage, PngError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
}

fn is_16bit(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() == 2
}

/// Decodes any PNG color type to RGB in `[0, 1]`.
pub fn decode_rgb(bytes: &[u8]) -> Result<ImageBuffer, PngError> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = if is_16bit(&img) {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok(ImageBuffer::new(w, h, values).expect("decoded samples are finite"))
}

/// Decodes any PNG color type to luma in `[0, 1]`.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, PngError> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = if is_16bit(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok(GrayImage::new(w, h, values).expect("decoded samples are finite"))
}
