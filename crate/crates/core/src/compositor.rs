//! Visibility-based compositing of the warped render with a generated
//! fallback image.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{GrayImage, ImageBuffer};
use crate::mesh::RangeGridMesh;
use crate::raster::RenderOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositeError {
    #[error("dimension mismatch: {what} is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        what: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("kernel size must be odd and positive, got {0}")]
    BadKernel(usize),
    #[error("image {width}x{height} is too small for {levels} pyramid levels")]
    TooSmall { width: usize, height: usize, levels: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
}

/// Per-pixel weight of the warped image, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask(GrayImage);

impl BlendMask {
    /// Wraps `weights`, clamping them to `[0, 1]`.
    pub fn new(mut weights: GrayImage) -> Self {
        for v in weights.values_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self(weights)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(GrayImage::filled(width, height, value))
    }

    pub fn weights(&self) -> &GrayImage {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn into_inner(self) -> GrayImage {
        self.0
    }

    /// Count of pixels with weight above one half.
    pub fn selected_count(&self) -> usize {
        self.0.values().iter().filter(|w| **w > 0.5).count()
    }
}

fn check_dims(what: &'static str, got: (usize, usize), expected: (usize, usize)) -> Result<(), CompositeError> {
    if got != expected {
        return Err(CompositeError::DimensionMismatch { what, got, expected });
    }
    Ok(())
}

/// One where the winning face is rendered and all three of its vertices are
/// visible, zero elsewhere, times the matte when given.
pub fn build_blend_mask(
    render: &RenderOutput,
    mesh: &RangeGridMesh,
    matte: Option<&GrayImage>,
) -> Result<BlendMask, CompositeError> {
    let dims = render.color.dims();
    if let Some(m) = matte {
        check_dims("matte", m.dims(), dims)?;
    }
    let (w, h) = dims;
    let weights = GrayImage::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let base = match render.face_id[i] {
            Some(f) if render.coverage[i] => {
                let f = f as usize;
                let ok = !mesh.face_culled[f]
                    && mesh.faces[f].iter().all(|&v| mesh.vertex_visible[v as usize]);
                if ok { 1.0 } else { 0.0 }
            }
            _ => 0.0,
        };
        base * matte.map_or(1.0, |m| m.get(x, y))
    });
    Ok(BlendMask::new(weights))
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize { m as usize } else { (period - m) as usize }
}

/// Shrinks the mask with a square min filter of radius `erode_px`, then box
/// blurs it with a `blur_px` wide window. Borders use reflect padding.
pub fn dilate_and_blur(mask: &BlendMask, erode_px: usize, blur_px: usize) -> Result<BlendMask, CompositeError> {
    if blur_px == 0 || blur_px.is_multiple_of(2) {
        return Err(CompositeError::BadKernel(blur_px));
    }
    let eroded = separable(mask.weights(), erode_px, |win| win.iter().cloned().fold(f64::INFINITY, f64::min));
    let r = blur_px / 2;
    let blurred = separable(&eroded, r, |win| win.iter().sum::<f64>() / win.len() as f64);
    Ok(BlendMask::new(blurred))
}

/// Applies a 1-D window reduction of radius `r` along x then y.
fn separable(img: &GrayImage, r: usize, reduce: impl Fn(&[f64]) -> f64) -> GrayImage {
    if r == 0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let r = r as isize;
    let mut win = Vec::with_capacity(2 * r as usize + 1);
    let horiz = GrayImage::from_fn(w, h, |x, y| {
        win.clear();
        win.extend((-r..=r).map(|d| img.get(reflect(x as isize + d, w), y)));
        reduce(&win)
    });
    let mut win = Vec::with_capacity(2 * r as usize + 1);
    GrayImage::from_fn(w, h, |x, y| {
        win.clear();
        win.extend((-r..=r).map(|d| horiz.get(x, reflect(y as isize + d, h))));
        reduce(&win)
    })
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn convolve_rows(img: &GrayImage, gain: f64) -> GrayImage {
    let (w, h) = img.dims();
    GrayImage::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for (k, c) in BINOMIAL.iter().enumerate() {
            acc += c * img.get(reflect(x as isize + k as isize - 2, w), y);
        }
        acc * gain
    })
}

fn convolve_cols(img: &GrayImage, gain: f64) -> GrayImage {
    let (w, h) = img.dims();
    GrayImage::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for (k, c) in BINOMIAL.iter().enumerate() {
            acc += c * img.get(x, reflect(y as isize + k as isize - 2, h));
        }
        acc * gain
    })
}

/// Blur with the binomial kernel and keep every second sample.
pub fn pyr_down(img: &GrayImage) -> GrayImage {
    let blurred = convolve_cols(&convolve_rows(img, 1.0), 1.0);
    let (w, h) = img.dims();
    GrayImage::from_fn(w.div_ceil(2), h.div_ceil(2), |x, y| blurred.get(2 * x, 2 * y))
}

/// Zero-insertion to `(width, height)` followed by the binomial kernel
/// scaled by two per axis.
pub fn pyr_up(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let sparse = GrayImage::from_fn(width, height, |x, y| {
        if x % 2 == 0 && y % 2 == 0 && x / 2 < img.width() && y / 2 < img.height() {
            img.get(x / 2, y / 2)
        } else {
            0.0
        }
    });
    convolve_cols(&convolve_rows(&sparse, 2.0), 2.0)
}

pub fn gaussian_pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut out = vec![img.clone()];
    while out.len() < levels {
        let next = pyr_down(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

/// Band-pass levels followed by the coarsest Gaussian level.
pub fn laplacian_pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let gauss = gaussian_pyramid(img, levels);
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let (w, h) = gauss[l].dims();
        let up = pyr_up(&gauss[l + 1], w, h);
        let band: Vec<f64> = gauss[l].values().iter().zip(up.values()).map(|(a, b)| a - b).collect();
        out.push(GrayImage::new(w, h, band).expect("same size"));
    }
    out.push(gauss[levels - 1].clone());
    out
}

pub fn reconstruct(pyramid: &[GrayImage]) -> GrayImage {
    let mut acc = pyramid.last().expect("non-empty pyramid").clone();
    for band in pyramid.iter().rev().skip(1) {
        let (w, h) = band.dims();
        let up = pyr_up(&acc, w, h);
        let sum: Vec<f64> = band.values().iter().zip(up.values()).map(|(a, b)| a + b).collect();
        acc = GrayImage::new(w, h, sum).expect("same size");
    }
    acc
}

/// Multi-band blend: Laplacian levels of both images mixed under the
/// Gaussian levels of the mask, then collapsed and clamped to `[0, 1]`.
pub fn laplacian_blend(
    warped: &ImageBuffer,
    generated: &ImageBuffer,
    mask: &BlendMask,
    levels: usize,
) -> Result<ImageBuffer, CompositeError> {
    let dims = warped.dims();
    check_dims("generated", generated.dims(), dims)?;
    check_dims("mask", mask.dims(), dims)?;
    if levels == 0 {
        return Err(CompositeError::NoLevels);
    }
    let min_side = 1usize.checked_shl(levels as u32).unwrap_or(usize::MAX);
    if dims.0 < min_side || dims.1 < min_side {
        return Err(CompositeError::TooSmall {
            width: dims.0,
            height: dims.1,
            levels,
        });
    }
    let mask_pyr = gaussian_pyramid(mask.weights(), levels);
    let wp = warped.split_channels();
    let gp = generated.split_channels();
    let planes: Vec<GrayImage> = (0..3)
        .into_par_iter()
        .map(|c| {
            let lw = laplacian_pyramid(&wp[c], levels);
            let lg = laplacian_pyramid(&gp[c], levels);
            let blended: Vec<GrayImage> = lw
                .iter()
                .zip(&lg)
                .zip(&mask_pyr)
                .map(|((a, b), m)| {
                    let v = a
                        .values()
                        .iter()
                        .zip(b.values())
                        .zip(m.values())
                        .map(|((a, b), m)| a * m + b * (1.0 - m))
                        .collect();
                    GrayImage::new(a.width(), a.height(), v).expect("same size")
                })
                .collect();
            reconstruct(&blended)
        })
        .collect();
    let planes: [GrayImage; 3] = planes.try_into().expect("three channels");
    Ok(ImageBuffer::merge_channels(&planes).clamp_unit())
}
