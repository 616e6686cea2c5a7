use crate::error::{Error, Result};
use crate::imaging::DisplacementField;
use crate::registration::ControlPointField;

/// Cubic B-spline weights for the four control points around a fractional
/// offset `u` in `[0, 1)`.
pub fn bspline_basis(u: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Input(format!("B-spline offset {u} outside [0, 1)")));
    }
    Ok(basis_unchecked(u))
}

#[inline]
pub(crate) fn basis_unchecked(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Centered cubic B-spline kernel, support `(-2, 2)`.
#[inline]
pub fn cubic_kernel(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`cubic_kernel`].
#[inline]
pub fn cubic_kernel_derivative(t: f64) -> f64 {
    let a = t.abs();
    let s = t.signum();
    if a < 1.0 {
        s * (-12.0 * a + 9.0 * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        -s * b * b / 2.0
    } else {
        0.0
    }
}

/// Per-pixel control index and weights along one axis.
#[derive(Debug, Clone)]
pub(crate) struct AxisWeights {
    pub first: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

impl AxisWeights {
    pub fn new(pixels: usize, spacing: usize) -> Self {
        let mut first = Vec::with_capacity(pixels);
        let mut weights = Vec::with_capacity(pixels);
        for p in 0..pixels {
            let c = p / spacing;
            let u = (p % spacing) as f64 / spacing as f64;
            first.push(c);
            weights.push(basis_unchecked(u));
        }
        AxisWeights { first, weights }
    }
}

/// Control-grid size needed to cover `pixels` at `spacing`.
pub fn grid_size(pixels: usize, spacing: usize) -> usize {
    pixels.div_ceil(spacing) + 3
}

fn check_grid(cp: &ControlPointField, width: usize, height: usize) -> Result<()> {
    if cp.grid_width != grid_size(width, cp.spacing) || cp.grid_height != grid_size(height, cp.spacing) {
        return Err(Error::Dimension(format!(
            "{}x{} control grid at spacing {} does not cover a {width}x{height} image",
            cp.grid_width, cp.grid_height, cp.spacing
        )));
    }
    Ok(())
}

/// Tensor-product cubic B-spline interpolation of the control velocities at
/// every pixel center.
pub fn interpolate_velocity(cp: &ControlPointField, width: usize, height: usize) -> Result<DisplacementField> {
    check_grid(cp, width, height)?;
    let wx = AxisWeights::new(width, cp.spacing);
    let wy = AxisWeights::new(height, cp.spacing);
    Ok(interpolate_with(cp, &wx, &wy))
}

pub(crate) fn interpolate_with(cp: &ControlPointField, wx: &AxisWeights, wy: &AxisWeights) -> DisplacementField {
    let width = wx.first.len();
    let height = wy.first.len();
    let gw = cp.grid_width;
    // pass 1: along x for every control row
    let mut rows = vec![[0.0; 2]; cp.grid_height * width];
    for gy in 0..cp.grid_height {
        let ctrl = &cp.velocities[gy * gw..(gy + 1) * gw];
        for x in 0..width {
            let c = wx.first[x];
            let w = &wx.weights[x];
            let mut acc = [0.0; 2];
            for k in 0..4 {
                let v = ctrl[c + k];
                acc[0] += w[k] * v[0];
                acc[1] += w[k] * v[1];
            }
            rows[gy * width + x] = acc;
        }
    }
    // pass 2: along y
    let mut vectors = vec![[0.0; 2]; width * height];
    for y in 0..height {
        let c = wy.first[y];
        let w = &wy.weights[y];
        for x in 0..width {
            let mut acc = [0.0; 2];
            for k in 0..4 {
                let v = rows[(c + k) * width + x];
                acc[0] += w[k] * v[0];
                acc[1] += w[k] * v[1];
            }
            vectors[y * width + x] = acc;
        }
    }
    DisplacementField {
        width,
        height,
        vectors,
    }
}

/// Adjoint of [`interpolate_with`]: pulls a dense gradient back to the control grid.
pub(crate) fn interpolate_adjoint(
    dense: &[[f64; 2]],
    grid_width: usize,
    grid_height: usize,
    wx: &AxisWeights,
    wy: &AxisWeights,
) -> Vec<[f64; 2]> {
    let width = wx.first.len();
    let height = wy.first.len();
    let mut rows = vec![[0.0; 2]; grid_height * width];
    for y in 0..height {
        let c = wy.first[y];
        let w = &wy.weights[y];
        for x in 0..width {
            let g = dense[y * width + x];
            for k in 0..4 {
                let r = &mut rows[(c + k) * width + x];
                r[0] += w[k] * g[0];
                r[1] += w[k] * g[1];
            }
        }
    }
    let mut out = vec![[0.0; 2]; grid_width * grid_height];
    for gy in 0..grid_height {
        for x in 0..width {
            let g = rows[gy * width + x];
            let c = wx.first[x];
            let w = &wx.weights[x];
            for k in 0..4 {
                let o = &mut out[gy * grid_width + c + k];
                o[0] += w[k] * g[0];
                o[1] += w[k] * g[1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_at_zero_and_half() {
        let b = bspline_basis(0.0).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0];
        for (x, y) in b.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        // oracle: the four polynomials evaluated at 1/2 by hand
        // (1/2)^3/6 = 1/48; (3/8 - 6/4 + 4)/6 = 23/48; (-3/8 + 3/4 + 3/2 + 1)/6 = 23/48
        let b = bspline_basis(0.5).unwrap();
        let expect = [1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0];
        for (x, y) in b.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((b[0] - 0.0208333333333).abs() < 1e-12);
    }

    #[test]
    fn basis_rejects_out_of_range() {
        assert!(bspline_basis(1.0).is_err());
        assert!(bspline_basis(-1e-9).is_err());
        assert!(bspline_basis(f64::NAN).is_err());
    }

    #[test]
    fn kernel_matches_basis() {
        for i in 0..20 {
            let u = i as f64 / 20.0;
            let b = bspline_basis(u).unwrap();
            // weight of the control point at offset k-1 from floor(t)
            for k in 0..4 {
                let t = u - (k as f64 - 1.0);
                assert!((cubic_kernel(t) - b[k]).abs() < 1e-14);
            }
        }
        for i in -40..40 {
            let t = i as f64 / 10.0 + 0.013;
            let h = 1e-6;
            let fd = (cubic_kernel(t + h) - cubic_kernel(t - h)) / (2.0 * h);
            assert!((cubic_kernel_derivative(t) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_and_zero_fields() {
        let mut cp = ControlPointField::zeros(20, 13, 4);
        let zero = interpolate_velocity(&cp, 20, 13).unwrap();
        assert!(zero.vectors.iter().all(|v| *v == [0.0, 0.0]));
        cp.velocities.iter_mut().for_each(|v| *v = [1.5, -0.25]);
        let dense = interpolate_velocity(&cp, 20, 13).unwrap();
        for v in &dense.vectors {
            assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_control_point_footprint() {
        let (w, h, s) = (40, 40, 4);
        let mut cp = ControlPointField::zeros(w, h, s);
        let (gx, gy) = (5, 6);
        cp.velocities[gy * cp.grid_width + gx] = [1.0, 0.0];
        let dense = interpolate_velocity(&cp, w, h).unwrap();
        // control index g sits at pixel (g - 1) * spacing
        let (px, py) = (((gx - 1) * s) as f64, ((gy - 1) * s) as f64);
        let mut support = 0;
        for y in 0..h {
            for x in 0..w {
                let oracle = cubic_kernel((x as f64 - px) / s as f64) * cubic_kernel((y as f64 - py) / s as f64);
                let v = dense.get(x, y);
                assert!((v[0] - oracle).abs() < 1e-14, "({x},{y})");
                assert_eq!(v[1], 0.0);
                if v[0] != 0.0 {
                    support += 1;
                }
            }
        }
        // open support of width 4 * spacing: 15 non-zero pixels per axis
        assert_eq!(support, 15 * 15);
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let cp = ControlPointField::zeros(20, 20, 4);
        assert!(matches!(interpolate_velocity(&cp, 24, 20), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn partition_of_unity(u in 0.0f64..1.0) {
            let b = bspline_basis(u).unwrap();
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(b.iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn adjoint_identity(seed in 0u64..500) {
            let (w, h, s) = (11, 9, 3);
            let mut cp = ControlPointField::zeros(w, h, s);
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5 };
            for v in cp.velocities.iter_mut() { *v = [next(), next()]; }
            let g: Vec<[f64; 2]> = (0..w * h).map(|_| [next(), next()]).collect();
            let wx = AxisWeights::new(w, s);
            let wy = AxisWeights::new(h, s);
            let dense = interpolate_with(&cp, &wx, &wy);
            let lhs: f64 = dense.vectors.iter().zip(&g).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
            let back = interpolate_adjoint(&g, cp.grid_width, cp.grid_height, &wx, &wy);
            let rhs: f64 = cp.velocities.iter().zip(&back).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
