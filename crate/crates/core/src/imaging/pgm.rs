//! Plain grayscale planes and 16-bit binary PGM export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::bundle::write_atomic;

/// Row-major scalar image without acquisition metadata; NaN marks missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    /// Sum over columns of the population variance down each column.
    pub fn column_variance_sum(&self) -> f64 {
        let n = self.height as f64;
        (0..self.width)
            .map(|x| {
                let col: Vec<f64> = (0..self.height).map(|y| self.data[y * self.width + x]).collect();
                let mean = col.iter().sum::<f64>() / n;
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
            })
            .sum()
    }

    /// Finite minimum and maximum, or `(0, 0)` when nothing is finite.
    pub fn finite_range(&self) -> (f64, f64) {
        let mut it = self.data.iter().copied().filter(|v| v.is_finite());
        match it.next() {
            None => (0.0, 0.0),
            Some(first) => it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))),
        }
    }
}

/// Encodes `image` as binary PGM (P5, maxval 65535, big-endian samples).
/// `range` maps linearly onto 0..=65535; values outside are clamped and NaN
/// becomes 0. Without a range the finite min/max is used.
pub fn encode_pgm16(image: &GrayImage, range: Option<(f64, f64)>) -> Vec<u8> {
    let (lo, hi) = range.unwrap_or_else(|| image.finite_range());
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
    out.reserve(image.data.len() * 2);
    for v in &image.data {
        let q = if !v.is_finite() || span <= 0.0 {
            0u16
        } else {
            (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, image: &GrayImage, range: Option<(f64, f64)>) -> Result<()> {
    write_atomic(path, &encode_pgm16(image, range))
}
