//! Portable FloatMap: `Pf` (one channel) or `PF` (RGB), 32-bit floats with
//! rows stored bottom to top. A negative scale marks little-endian data.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfmError {
    #[error("not a PFM header")]
    BadHeader,
    #[error("expected {expected} data bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("sample count {got} does not match {width}x{height}x{channels}")]
    BadLength { got: usize, width: usize, height: usize, channels: usize },
}

/// Decoded raster with rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, PfmError> {
        if data.len() != width * height * channels || !(channels == 1 || channels == 3) {
            return Err(PfmError::BadLength { got: data.len(), width, height, channels });
        }
        Ok(Self { width, height, channels, data })
    }

    /// Single-channel map from `f64` samples (narrowed to `f32`).
    pub fn gray(width: usize, height: usize, values: &[f64]) -> Result<Self, PfmError> {
        Self::new(width, height, 1, values.iter().map(|v| *v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    /// Little-endian encoding with scale `-1.0`.
    pub fn encode(&self) -> Vec<u8> {
        let tag = if self.channels == 1 { "Pf" } else { "PF" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PfmError> {
        // header: three whitespace-separated fields, then one whitespace byte
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos || pos >= bytes.len() {
                return Err(PfmError::BadHeader);
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| PfmError::BadHeader)?);
        }
        let body = &bytes[pos + 1..];
        let channels = match fields[0] {
            "Pf" => 1,
            "PF" => 3,
            _ => return Err(PfmError::BadHeader),
        };
        let width: usize = fields[1].parse().map_err(|_| PfmError::BadHeader)?;
        let height: usize = fields[2].parse().map_err(|_| PfmError::BadHeader)?;
        let scale: f32 = fields[3].parse().map_err(|_| PfmError::BadHeader)?;
        if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
            return Err(PfmError::BadHeader);
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels * 4))
            .ok_or(PfmError::BadHeader)?;
        if body.len() < expected {
            return Err(PfmError::Truncated { expected, found: body.len() });
        }
        let little = scale < 0.0;
        let row = width * channels;
        let mut data = vec![0f32; width * height * channels];
        for (i, chunk) in body[..expected].chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(Self { width, height, channels, data })
    }
}
