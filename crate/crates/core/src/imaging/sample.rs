use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Splits a clamped coordinate into a cell index and fraction.
#[inline]
fn cell(c: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

/// Bilinear interpolation of a row-major grid with border replication.
#[inline]
pub fn bilinear_sample_clamped(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx) = cell(x, width);
    let (y0, y1, fy) = cell(y, height);
    let r0 = y0 * width;
    let r1 = y1 * width;
    let top = data[r0 + x0] + fx * (data[r0 + x1] - data[r0 + x0]);
    let bot = data[r1 + x0] + fx * (data[r1 + x1] - data[r1 + x0]);
    top + fy * (bot - top)
}

/// Corner indices and weights of the clamped bilinear interpolant, for scattering.
#[inline]
pub(crate) fn bilinear_weights(width: usize, height: usize, x: f64, y: f64) -> ([usize; 4], [f64; 4]) {
    let (x0, x1, fx) = cell(x, width);
    let (y0, y1, fy) = cell(y, height);
    (
        [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Samples a frame at real pixel coordinates; out-of-bounds coordinates are clamped.
pub fn bilinear_sample(frame: &Frame, x: f64, y: f64) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Input(format!("non-finite sample coordinate ({x}, {y})")));
    }
    Ok(bilinear_sample_clamped(&frame.data, frame.width, frame.height, x, y))
}

/// Spatial derivative of the clamped bilinear interpolant along one axis.
///
/// Outside the domain the interpolant is constant along the clamped axis, so
/// the derivative is zero. At grid nodes the left and right cell slopes are
/// averaged, which is what a symmetric finite difference observes.
#[inline]
fn axis_slope(c: f64, n: usize, slope_of_cell: impl Fn(usize) -> f64) -> f64 {
    if n < 2 || c < 0.0 || c > (n - 1) as f64 {
        return 0.0;
    }
    let k = c.floor();
    if c == k {
        let k = k as usize;
        let left = if k >= 1 { slope_of_cell(k - 1) } else { 0.0 };
        let right = if k + 1 < n { slope_of_cell(k) } else { 0.0 };
        0.5 * (left + right)
    } else {
        slope_of_cell(k as usize)
    }
}

/// Gradient `(d/dx, d/dy)` of [`bilinear_sample_clamped`] at `(x, y)`.
#[inline]
pub fn bilinear_gradient(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> [f64; 2] {
    let (y0, y1, fy) = cell(y, height);
    let col = |i: usize| data[y0 * width + i] + fy * (data[y1 * width + i] - data[y0 * width + i]);
    let gx = axis_slope(x, width, |i| col(i + 1) - col(i));

    let (x0, x1, fx) = cell(x, width);
    let row = |j: usize| data[j * width + x0] + fx * (data[j * width + x1] - data[j * width + x0]);
    let gy = axis_slope(y, height, |j| row(j + 1) - row(j));
    [gx, gy]
}
