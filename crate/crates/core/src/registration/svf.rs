//! Stationary velocity field exponentiation, warping, and Jacobians.
//!
//! Warps use the pull-back convention: `out(x) = in(x + ψ(x))`.

use crate::error::{Error, Result};
use crate::imaging::{bilinear_gradient, bilinear_sample_clamped, bilinear_weights, DisplacementField, Frame};

/// A displacement stored as two planes, convenient for bilinear sampling.
#[derive(Debug, Clone)]
pub(crate) struct Planes {
    pub width: usize,
    pub height: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Planes {
    pub fn from_field(f: &DisplacementField, scale: f64) -> Self {
        let (x, y) = f.vectors.iter().map(|v| (v[0] * scale, v[1] * scale)).unzip();
        Planes {
            width: f.width,
            height: f.height,
            x,
            y,
        }
    }

    pub fn to_field(&self) -> DisplacementField {
        DisplacementField {
            width: self.width,
            height: self.height,
            vectors: self.x.iter().zip(&self.y).map(|(a, b)| [*a, *b]).collect(),
        }
    }

    /// One squaring step: `d(x) + d(x + d(x))`.
    fn square(&self) -> Planes {
        let (w, h) = (self.width, self.height);
        let mut x = Vec::with_capacity(w * h);
        let mut y = Vec::with_capacity(w * h);
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let sx = px as f64 + self.x[i];
                let sy = py as f64 + self.y[i];
                x.push(self.x[i] + bilinear_sample_clamped(&self.x, w, h, sx, sy));
                y.push(self.y[i] + bilinear_sample_clamped(&self.y, w, h, sx, sy));
            }
        }
        Planes { width: w, height: h, x, y }
    }

    /// Adjoint of [`Planes::square`] evaluated at `self`.
    fn square_adjoint(&self, ax: &[f64], ay: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let mut gx = ax.to_vec();
        let mut gy = ay.to_vec();
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let (a0, a1) = (ax[i], ay[i]);
                if a0 == 0.0 && a1 == 0.0 {
                    continue;
                }
                let sx = px as f64 + self.x[i];
                let sy = py as f64 + self.y[i];
                let (idx, wts) = bilinear_weights(w, h, sx, sy);
                for k in 0..4 {
                    gx[idx[k]] += a0 * wts[k];
                    gy[idx[k]] += a1 * wts[k];
                }
                let dxg = bilinear_gradient(&self.x, w, h, sx, sy);
                let dyg = bilinear_gradient(&self.y, w, h, sx, sy);
                gx[i] += a0 * dxg[0] + a1 * dyg[0];
                gy[i] += a0 * dxg[1] + a1 * dyg[1];
            }
        }
        (gx, gy)
    }
}

/// Forward scaling-and-squaring keeping every intermediate field.
pub(crate) fn integrate_cached(velocity: &DisplacementField, steps: u32) -> Vec<Planes> {
    let mut levels = Vec::with_capacity(steps as usize + 1);
    levels.push(Planes::from_field(velocity, 0.5f64.powi(steps as i32)));
    for _ in 0..steps {
        let next = levels.last().expect("non-empty").square();
        levels.push(next);
    }
    levels
}

/// Back-propagates a gradient w.r.t. the final displacement to the velocity.
pub(crate) fn integrate_adjoint(levels: &[Planes], ax: Vec<f64>, ay: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let steps = levels.len() - 1;
    let (mut gx, mut gy) = (ax, ay);
    for k in (0..steps).rev() {
        let (nx, ny) = levels[k].square_adjoint(&gx, &gy);
        gx = nx;
        gy = ny;
    }
    let s = 0.5f64.powi(steps as i32);
    gx.iter_mut().for_each(|g| *g *= s);
    gy.iter_mut().for_each(|g| *g *= s);
    (gx, gy)
}

/// Exponentiates a stationary velocity field by scaling and squaring.
///
/// The velocity is scaled by `2^-steps` and the resulting small displacement
/// is composed with itself `steps` times; `steps == 0` returns the velocity.
pub fn integrate_svf(velocity: &DisplacementField, steps: u32) -> Result<DisplacementField> {
    if velocity.vectors.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Input("velocity field contains non-finite values".into()));
    }
    Ok(integrate_cached(velocity, steps)
        .last()
        .expect("non-empty")
        .to_field())
}

/// Pull-back warp: `out(x) = frame(x + disp(x))` with border clamping.
pub fn warp_image(frame: &Frame, disp: &DisplacementField) -> Result<Frame> {
    disp.check_matches(frame.width, frame.height)?;
    Ok(warp_unchecked(frame, disp))
}

pub(crate) fn warp_unchecked(frame: &Frame, disp: &DisplacementField) -> Frame {
    let (w, h) = (frame.width, frame.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = disp.vectors[y * w + x];
            data.push(bilinear_sample_clamped(&frame.data, w, h, x as f64 + d[0], y as f64 + d[1]));
        }
    }
    Frame {
        width: w,
        height: h,
        data,
        meta: frame.meta,
    }
}

/// `det(I + ∇disp)` per pixel; central differences inside, one-sided at borders.
pub fn jacobian_determinant(disp: &DisplacementField) -> Result<Vec<f64>> {
    let (w, h) = (disp.width, disp.height);
    if w < 3 || h < 3 {
        return Err(Error::Dimension(format!(
            "Jacobian needs a field of at least 3x3, got {w}x{h}"
        )));
    }
    let v = |x: usize, y: usize| disp.vectors[y * w + x];
    let diff = |a: [f64; 2], b: [f64; 2], span: f64| [(a[0] - b[0]) / span, (a[1] - b[1]) / span];
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ddx = if x == 0 {
                diff(v(1, y), v(0, y), 1.0)
            } else if x == w - 1 {
                diff(v(w - 1, y), v(w - 2, y), 1.0)
            } else {
                diff(v(x + 1, y), v(x - 1, y), 2.0)
            };
            let ddy = if y == 0 {
                diff(v(x, 1), v(x, 0), 1.0)
            } else if y == h - 1 {
                diff(v(x, h - 1), v(x, h - 2), 1.0)
            } else {
                diff(v(x, y + 1), v(x, y - 1), 2.0)
            };
            out.push((1.0 + ddx[0]) * (1.0 + ddy[1]) - ddy[0] * ddx[1]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::DiffusionMeta;
    use crate::registration::{interpolate_velocity, ControlPointField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_velocity(w: usize, h: usize, max: f64, seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp = ControlPointField::zeros(w, h, 8);
        for v in cp.velocities.iter_mut() {
            *v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        }
        let dense = interpolate_velocity(&cp, w, h).unwrap();
        let m = dense.max_norm();
        dense.scaled(max / m)
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let v = DisplacementField::zeros(12, 9);
        for steps in [0, 1, 6] {
            assert_eq!(integrate_svf(&v, steps).unwrap(), v);
        }
    }

    #[test]
    fn constant_velocity_is_translation() {
        let v = DisplacementField::constant(20, 16, [1.25, -2.5]);
        let d = integrate_svf(&v, 6).unwrap();
        for vec in &d.vectors {
            assert!((vec[0] - 1.25).abs() < 1e-6 && (vec[1] + 2.5).abs() < 1e-6);
        }
        assert_eq!(integrate_svf(&v, 0).unwrap(), v);
    }

    #[test]
    fn matches_fine_euler_flow() {
        let (w, h) = (48, 40);
        let v = smooth_velocity(w, h, 3.0, 5);
        let d = integrate_svf(&v, 6).unwrap();
        let (vx, vy) = v.components();
        // oracle: 1024-step forward Euler integration of the flow
        let n = 1024;
        let dt = 1.0 / n as f64;
        let mut err = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (mut px, mut py) = (x as f64, y as f64);
                for _ in 0..n {
                    let ux = bilinear_sample_clamped(&vx, w, h, px, py);
                    let uy = bilinear_sample_clamped(&vy, w, h, px, py);
                    px += dt * ux;
                    py += dt * uy;
                }
                let e = d.get(x, y);
                err += (e[0] - (px - x as f64)).hypot(e[1] - (py - y as f64));
            }
        }
        let mean = err / (w * h) as f64;
        assert!(mean < 0.05, "mean error {mean}");
    }

    #[test]
    fn warp_identity_and_shift() {
        let mut data = vec![0.0; 10 * 6];
        data[3 * 10 + 4] = 1.0;
        let f = Frame::new(10, 6, data, DiffusionMeta::reference()).unwrap();
        assert_eq!(warp_image(&f, &DisplacementField::zeros(10, 6)).unwrap(), f);
        let moved = warp_image(&f, &DisplacementField::constant(10, 6, [-2.0, 0.0])).unwrap();
        // oracle: direct index shift
        let pos = moved.data.iter().position(|v| *v == 1.0).unwrap();
        assert_eq!((pos % 10, pos / 10), (6, 3));
        assert!(warp_image(&f, &DisplacementField::zeros(9, 6)).is_err());
    }

    #[test]
    fn inverse_consistency_on_smooth_image() {
        let (w, h) = (48, 48);
        let data: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                0.5 + 0.4 * (-((x - 24.0).powi(2) + (y - 22.0).powi(2)) / 120.0).exp()
            })
            .collect();
        let f = Frame::new(w, h, data, DiffusionMeta::reference()).unwrap();
        let v = smooth_velocity(w, h, 2.0, 9);
        let fwd = integrate_svf(&v, 6).unwrap();
        let back = integrate_svf(&v.scaled(-1.0), 6).unwrap();
        let round = warp_image(&warp_image(&f, &back).unwrap(), &fwd).unwrap();
        let mae = round.data.iter().zip(&f.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / (w * h) as f64;
        assert!(mae < 0.02, "{mae}");
    }

    #[test]
    fn jacobian_examples() {
        let zero = DisplacementField::zeros(5, 4);
        assert!(jacobian_determinant(&zero).unwrap().iter().all(|d| *d == 1.0));
        let (a, b) = (0.2, -0.3);
        let lin = DisplacementField::new(
            6,
            5,
            (0..30).map(|i| [a * (i % 6) as f64, b * (i / 6) as f64]).collect(),
        )
        .unwrap();
        for d in jacobian_determinant(&lin).unwrap() {
            assert!((d - (1.0 + a) * (1.0 + b)).abs() < 1e-12);
        }
        assert!(jacobian_determinant(&DisplacementField::zeros(2, 5)).is_err());
        let v = smooth_velocity(40, 40, 3.0, 2);
        let d = integrate_svf(&v, 6).unwrap();
        let min = jacobian_determinant(&d).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (w, h) = (12, 10);
        let v = smooth_velocity(w, h, 2.5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wx: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wy: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |vel: &DisplacementField| {
            let d = integrate_svf(vel, 4).unwrap();
            d.vectors.iter().enumerate().map(|(i, e)| wx[i] * e[0] + wy[i] * e[1]).sum::<f64>()
        };
        let levels = integrate_cached(&v, 4);
        let (gx, gy) = integrate_adjoint(&levels, wx.clone(), wy.clone());
        for i in [0, 17, 55, 119] {
            for c in 0..2 {
                let eps = 1e-6;
                let mut p = v.clone();
                p.vectors[i][c] += eps;
                let mut m = v.clone();
                m.vectors[i][c] -= eps;
                let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
                let an = if c == 0 { gx[i] } else { gy[i] };
                assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "pixel {i} comp {c}: {an} vs {fd}");
            }
        }
    }
}
