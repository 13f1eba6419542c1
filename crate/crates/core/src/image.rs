//! Float raster types shared by the pipeline stages.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("buffer length {len} does not match {width}x{height}x{channels}")]
    BadLength {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Three-channel float image, row-major, interleaved RGB, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if values.len() != width * height * Self::CHANNELS {
            return Err(ImageError::BadLength {
                len: values.len(),
                width,
                height,
                channels: Self::CHANNELS,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut values = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            values.extend_from_slice(&rgb);
        }
        Self { width, height, values }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut values = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                values.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.values[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// has its center at `(i + 0.5, j + 0.5)`. Out-of-range coordinates
    /// clamp to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let fx = (x - 0.5).clamp(0.0, max_x);
        let fy = (y - 0.5).clamp(0.0, max_y);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * tx;
            let bottom = p01[c] + (p11[c] - p01[c]) * tx;
            out[c] = top + (bottom - top) * ty;
        }
        out
    }

    /// Splits into one grayscale plane per channel.
    pub fn split_channels(&self) -> [GrayImage; 3] {
        let n = self.width * self.height;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (i, px) in self.values.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c][i] = px[c];
            }
        }
        planes.map(|values| GrayImage {
            width: self.width,
            height: self.height,
            values,
        })
    }

    /// Interleaves three equally sized planes.
    pub fn merge_channels(planes: &[GrayImage; 3]) -> Self {
        let (width, height) = planes[0].dims();
        let mut values = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            for plane in planes {
                values.push(plane.values[i]);
            }
        }
        Self { width, height, values }
    }

    /// BT.601 luma.
    pub fn luma(&self) -> GrayImage {
        let values = self
            .values
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.values {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

/// Single-channel float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if values.len() != width * height {
            return Err(ImageError::BadLength {
                len: values.len(),
                width,
                height,
                channels: 1,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let img = ImageBuffer::from_fn(4, 3, |x, y| [x as f64 * 0.1, y as f64 * 0.2, 0.5]);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.sample_bilinear(x as f64 + 0.5, y as f64 + 0.5), img.pixel(x, y));
            }
        }
        let mid = img.sample_bilinear(1.0, 0.5);
        assert!((mid[0] - 0.05).abs() < 1e-15);
        // clamped outside
        assert_eq!(img.sample_bilinear(-3.0, -3.0), img.pixel(0, 0));
        assert_eq!(img.sample_bilinear(10.0, 10.0), img.pixel(3, 2));
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageBuffer::new(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn split_merge() {
        let img = ImageBuffer::from_fn(3, 2, |x, y| [x as f64, y as f64, (x + y) as f64]);
        let planes = img.split_channels();
        assert_eq!(planes[2].get(2, 1), 3.0);
        assert_eq!(ImageBuffer::merge_channels(&planes), img);
    }
}
