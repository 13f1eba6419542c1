//! Dense depth maps and edge-preserving depth smoothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("kernel size must be odd and positive, got {0}")]
    BadKernel(i64),
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("depth buffer of length {len} does not match {width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
    #[error("pixel {0} is flagged valid but has depth {1}")]
    InvalidValue(usize, f64),
}

/// Per-pixel camera-space depth (along the optical axis) with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self, DepthError> {
        if values.len() != width * height || valid.len() != values.len() {
            return Err(DepthError::BadLength {
                len: values.len(),
                width,
                height,
            });
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v > 0.0) {
                return Err(DepthError::InvalidValue(i, v));
            }
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Raw samples where non-finite or non-positive values mark holes.
    pub fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Result<Self, DepthError> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(width, height, values, valid)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Result<Self, DepthError> {
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(d) => {
                        values.push(d);
                        valid.push(true);
                    }
                    None => {
                        values.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        Self::new(width, height, values, valid)
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

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Samples with holes written as `0.0`, the encoding used on disk.
    pub fn encoded(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect()
    }

    /// Invalidates every pixel where `keep` is false.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if !keep(x, y) {
                    out.valid[y * self.width + x] = false;
                }
            }
        }
        out
    }

    /// Median of the valid samples, `None` when there are none.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .filter_map(|(&d, &ok)| ok.then_some(d))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    pub kernel: usize,
    /// Range sigma, in units of the median depth.
    pub sigma_color: f64,
    /// Spatial sigma in pixels.
    pub sigma_space: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            kernel: 5,
            sigma_color: 0.1,
            sigma_space: 1.0,
        }
    }
}

/// Bilateral filter over valid depth samples.
///
/// The range term compares depths after dividing by the median valid depth,
/// so `sigma_color` is scale free. Holes keep their flag and contribute no
/// weight to their neighbours.
pub fn smooth_depth_bilateral(depth: &DepthMap, params: &BilateralParams) -> Result<DepthMap, DepthError> {
    let kernel = params.kernel;
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(DepthError::BadKernel(kernel as i64));
    }
    for s in [params.sigma_color, params.sigma_space] {
        if !(s.is_finite() && s > 0.0) {
            return Err(DepthError::BadSigma(s));
        }
    }
    let Some(scale) = depth.median() else {
        return Ok(depth.clone());
    };
    let radius = (kernel / 2) as isize;
    let (w, h) = (depth.width as isize, depth.height as isize);

    let side = kernel;
    let mut spatial = vec![0.0; side * side];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let r2 = (dx * dx + dy * dy) as f64;
            spatial[((dy + radius) as usize) * side + (dx + radius) as usize] =
                (-r2 / (2.0 * params.sigma_space * params.sigma_space)).exp();
        }
    }
    let range_denom = 2.0 * params.sigma_color * params.sigma_color;

    let mut out = depth.values.clone();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !depth.valid[i] {
                continue;
            }
            let center = depth.values[i];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -radius..=radius {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -radius..=radius {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let j = (yy * w + xx) as usize;
                    if !depth.valid[j] {
                        continue;
                    }
                    let diff = (depth.values[j] - center) / scale;
                    let weight = spatial[((dy + radius) as usize) * side + (dx + radius) as usize]
                        * (-diff * diff / range_denom).exp();
                    num += weight * depth.values[j];
                    den += weight;
                }
            }
            // den >= 1 because the center always contributes with weight 1
            out[i] = num / den;
        }
    }
    Ok(DepthMap {
        width: depth.width,
        height: depth.height,
        values: out,
        valid: depth.valid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct weighted sum over an explicit neighbour list.
    fn oracle(depth: &DepthMap, k: usize, sc: f64, ss: f64) -> Vec<f64> {
        let med = depth.median().unwrap();
        let r = (k / 2) as i64;
        let mut out = depth.values().to_vec();
        for y in 0..depth.height() as i64 {
            for x in 0..depth.width() as i64 {
                let Some(c) = depth.get(x as usize, y as usize) else { continue };
                let neighbours: Vec<(i64, i64, f64)> = (y - r..=y + r)
                    .flat_map(|yy| (x - r..=x + r).map(move |xx| (xx, yy)))
                    .filter(|&(xx, yy)| xx >= 0 && yy >= 0 && xx < depth.width() as i64 && yy < depth.height() as i64)
                    .filter_map(|(xx, yy)| depth.get(xx as usize, yy as usize).map(|d| (xx - x, yy - y, d)))
                    .collect();
                let ws: Vec<f64> = neighbours
                    .iter()
                    .map(|&(dx, dy, d)| {
                        let gs = (-((dx * dx + dy * dy) as f64) / (2.0 * ss * ss)).exp();
                        let gr = (-((d - c) / med).powi(2) / (2.0 * sc * sc)).exp();
                        gs * gr
                    })
                    .collect();
                let total: f64 = ws.iter().sum();
                out[(y * depth.width() as i64 + x) as usize] =
                    neighbours.iter().zip(&ws).map(|(n, w)| n.2 * w).sum::<f64>() / total;
            }
        }
        out
    }

    #[test]
    fn constant_map_is_unchanged() {
        let d = DepthMap::from_fn(9, 7, |_, _| Some(1.7)).unwrap();
        let s = smooth_depth_bilateral(&d, &BilateralParams::default()).unwrap();
        for v in s.values() {
            assert!((v - 1.7).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let d = DepthMap::from_fn(6, 5, |x, y| Some(1.0 + (x * 7 + y * 3) as f64 * 0.01)).unwrap();
        let s = smooth_depth_bilateral(
            &d,
            &BilateralParams {
                kernel: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s, d);
    }

    #[test]
    fn step_edge_matches_direct_sum() {
        let d = DepthMap::from_fn(5, 5, |x, _| Some(if x < 2 { 1.0 } else { 1.08 })).unwrap();
        let s = smooth_depth_bilateral(&d, &BilateralParams::default()).unwrap();
        let expect = oracle(&d, 5, 0.1, 1.0);
        for (a, b) in s.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // the step is softened but not erased
        assert!(s.get(1, 2).unwrap() > 1.0 && s.get(2, 2).unwrap() < 1.08);
    }

    #[test]
    fn holes_get_no_weight() {
        let mut raw: Vec<f64> = (0..25).map(|i| 1.0 + (i % 5) as f64 * 0.02).collect();
        raw[12] = f64::NAN;
        raw[3] = -1.0;
        let d = DepthMap::from_raw(5, 5, raw).unwrap();
        let s = smooth_depth_bilateral(&d, &BilateralParams::default()).unwrap();
        assert_eq!(s.valid_mask(), d.valid_mask());
        let expect = oracle(&d, 5, 0.1, 1.0);
        for (i, e) in expect.iter().enumerate() {
            if d.valid_mask()[i] {
                assert!((s.values()[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_kernels() {
        let d = DepthMap::from_fn(3, 3, |_, _| Some(1.0)).unwrap();
        for k in [0, 2, 4] {
            let p = BilateralParams {
                kernel: k,
                ..Default::default()
            };
            assert!(matches!(smooth_depth_bilateral(&d, &p), Err(DepthError::BadKernel(_))));
        }
        let p = BilateralParams {
            sigma_space: 0.0,
            ..Default::default()
        };
        assert!(matches!(smooth_depth_bilateral(&d, &p), Err(DepthError::BadSigma(_))));
    }

    proptest! {
        #[test]
        fn output_stays_within_local_range(
            vals in prop::collection::vec(prop_oneof![4 => 0.5f64..3.0, 1 => Just(0.0)], 64),
            k in prop_oneof![Just(1usize), Just(3), Just(5), Just(7)],
            sc in 0.01f64..1.0,
            ss in 0.3f64..3.0,
        ) {
            let d = DepthMap::from_raw(8, 8, vals).unwrap();
            prop_assume!(d.valid_count() > 0);
            let s = smooth_depth_bilateral(&d, &BilateralParams { kernel: k, sigma_color: sc, sigma_space: ss }).unwrap();
            prop_assert_eq!(s.valid_mask(), d.valid_mask());
            let r = (k / 2) as i64;
            for y in 0..8i64 {
                for x in 0..8i64 {
                    let Some(out) = s.get(x as usize, y as usize) else { continue };
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for yy in (y - r).max(0)..=(y + r).min(7) {
                        for xx in (x - r).max(0)..=(x + r).min(7) {
                            if let Some(v) = d.get(xx as usize, yy as usize) {
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
                }
            }
        }
    }
}
