//! Image quality and identity metrics, and their aggregation into reports.
//!
//! PSNR uses a peak of 1.0 on `[0, 1]` images. SSIM is the mean local SSIM on
//! BT.601 luma with an 11x11 Gaussian window (sigma 1.5) and constants
//! `K1 = 0.01`, `K2 = 0.03`. Perceptual distances are never computed here;
//! report rows accept them as precomputed values.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::compositor::BlendMask;
use crate::image::{GrayImage, ImageBuffer};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("feature vector has zero norm")]
    ZeroVector,
    #[error("feature vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("feature vector contains non-finite values")]
    NonFinite,
    #[error("report has no rows")]
    EmptyReport,
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`. With a
/// mask, only pixels whose weight exceeds one half are compared.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&BlendMask>) -> Result<f64, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    if let Some(m) = mask {
        if m.dims() != a.dims() {
            return Err(MetricError::DimensionMismatch(m.dims(), a.dims()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.values().chunks_exact(3).zip(b.values().chunks_exact(3)).enumerate() {
        if let Some(m) = mask {
            if m.weights().values()[i] <= 0.5 {
                continue;
            }
        }
        for c in 0..3 {
            let d = pa[c] - pb[c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(MetricError::EmptyMask);
    }
    let mse = sum / count as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gx * gy / (total * total));
        }
    }
    w
}

/// Mean SSIM over every fully contained window position.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    Ok(ssim_gray(&a.luma(), &b.luma()))
}

fn ssim_gray(a: &GrayImage, b: &GrayImage) -> f64 {
    let (w, h) = a.dims();
    let win = gaussian_window();
    let n = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let k = win[j * n + i];
                    mu_a += k * a.get(x0 + i, y0 + j);
                    mu_b += k * b.get(x0 + i, y0 + j);
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let k = win[j * n + i];
                    let da = a.get(x0 + i, y0 + j) - mu_a;
                    let db = b.get(x0 + i, y0 + j) - mu_b;
                    var_a += k * (da * da);
                    var_b += k * (db * db);
                    cov += k * (da * db);
                }
            }
            let num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Identity embedding, finite with non-zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(MetricError::ZeroVector);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity; higher means better identity preservation.
pub fn id_score(f1: &FeatureVector, f2: &FeatureVector) -> Result<f64, MetricError> {
    if f1.0.len() != f2.0.len() {
        return Err(MetricError::LengthMismatch(f1.0.len(), f2.0.len()));
    }
    let dot: f64 = f1.0.iter().zip(&f2.0).map(|(a, b)| a * b).sum();
    let n1 = f1.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = f2.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_score: Option<f64>,
}

/// Column means; an optional column is `None` when no row has it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub id_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub aggregate: MetricAggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate_report(rows: Vec<MetricRow>) -> Result<MetricReport, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyReport);
    }
    let aggregate = MetricAggregate {
        psnr_db: mean(rows.iter().map(|r| r.psnr_db)).expect("non-empty"),
        ssim: mean(rows.iter().map(|r| r.ssim)).expect("non-empty"),
        lpips: mean(rows.iter().filter_map(|r| r.lpips)),
        id_score: mean(rows.iter().filter_map(|r| r.id_score)),
    };
    Ok(MetricReport {
        per_image: rows,
        aggregate,
    })
}

impl MetricReport {
    /// Aligned text table, one line per image plus a mean row labelled
    /// `method`.
    pub fn to_text(&self, method: &str) -> String {
        let fmt_psnr = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.2}") };
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let header = ["Methods", "PSNR↑", "SSIM↑", "LPIPS↓", "ID↑"].map(String::from);
        let mut lines: Vec<[String; 5]> = vec![header];
        for r in &self.per_image {
            lines.push([
                r.name.clone(),
                fmt_psnr(r.psnr_db),
                format!("{:.3}", r.ssim),
                fmt_opt(r.lpips),
                fmt_opt(r.id_score),
            ]);
        }
        let a = &self.aggregate;
        lines.push([
            method.to_string(),
            fmt_psnr(a.psnr_db),
            format!("{:.3}", a.ssim),
            fmt_opt(a.lpips),
            fmt_opt(a.id_score),
        ]);
        let mut widths = [0usize; 5];
        for l in &lines {
            for (w, cell) in widths.iter_mut().zip(l) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let render = |l: &[String; 5]| {
            l.iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    let pad = w - cell.chars().count();
                    if i == 0 { format!("{cell}{}", " ".repeat(pad)) } else { format!("{}{cell}", " ".repeat(pad)) }
                })
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        let rule: String = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-");
        for (i, l) in lines.iter().enumerate() {
            if i == 1 || i == lines.len() - 1 {
                out.push_str(&rule);
                out.push('\n');
            }
            out.push_str(&render(l));
            out.push('\n');
        }
        out
    }
}
