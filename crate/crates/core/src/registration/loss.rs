//! The registration objective `−NMI + λ·bending energy` and its gradient.

use crate::error::{Error, Result};
use crate::imaging::{bilinear_gradient, bilinear_sample_clamped, Frame};
use crate::registration::bspline::{interpolate_adjoint, interpolate_with, AxisWeights};
use crate::registration::histogram::{check_unit_range, nmi_with_gradient, BinMap};
use crate::registration::svf::{integrate_adjoint, integrate_cached};
use crate::registration::{ControlPointField, RegistrationConfig};

/// Loss decomposition at one control field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub nmi: f64,
    pub bending: f64,
    /// `−nmi + lambda_reg × bending`.
    pub total: f64,
}

impl LossTerms {
    pub fn nmi_term(&self) -> f64 {
        -self.nmi
    }

    pub fn reg_term(&self) -> f64 {
        self.total + self.nmi
    }
}

fn lattice_value(cp: &ControlPointField, gx: usize, gy: usize, c: usize) -> f64 {
    cp.velocities[gy * cp.grid_width + gx][c]
}

/// Mean squared second difference of the control lattice, summed over both
/// velocity components: `Σ (Dxx² + Dyy² + 2·Dxy²) / N`.
///
/// `Dxx` and `Dyy` are centered on interior lattice points; `Dxy` is the
/// mixed difference over each lattice cell.
pub fn bending_energy(cp: &ControlPointField) -> f64 {
    let (gw, gh) = (cp.grid_width, cp.grid_height);
    if cp.is_empty() {
        return 0.0;
    }
    let v = |x, y, c| lattice_value(cp, x, y, c);
    let mut sum = 0.0;
    for c in 0..2 {
        for y in 0..gh {
            for x in 1..gw.saturating_sub(1) {
                let d = v(x + 1, y, c) - 2.0 * v(x, y, c) + v(x - 1, y, c);
                sum += d * d;
            }
        }
        for y in 1..gh.saturating_sub(1) {
            for x in 0..gw {
                let d = v(x, y + 1, c) - 2.0 * v(x, y, c) + v(x, y - 1, c);
                sum += d * d;
            }
        }
        for y in 0..gh.saturating_sub(1) {
            for x in 0..gw.saturating_sub(1) {
                let d = v(x + 1, y + 1, c) - v(x + 1, y, c) - v(x, y + 1, c) + v(x, y, c);
                sum += 2.0 * d * d;
            }
        }
    }
    sum / cp.len() as f64
}

/// Gradient of [`bending_energy`] w.r.t. every control velocity.
pub fn bending_energy_gradient(cp: &ControlPointField) -> Vec<[f64; 2]> {
    let (gw, gh) = (cp.grid_width, cp.grid_height);
    let mut g = vec![[0.0; 2]; cp.len()];
    if cp.is_empty() {
        return g;
    }
    let n = cp.len() as f64;
    let v = |x, y, c| lattice_value(cp, x, y, c);
    let idx = |x: usize, y: usize| y * gw + x;
    for c in 0..2 {
        for y in 0..gh {
            for x in 1..gw.saturating_sub(1) {
                let d = 2.0 * (v(x + 1, y, c) - 2.0 * v(x, y, c) + v(x - 1, y, c)) / n;
                g[idx(x + 1, y)][c] += d;
                g[idx(x, y)][c] -= 2.0 * d;
                g[idx(x - 1, y)][c] += d;
            }
        }
        for y in 1..gh.saturating_sub(1) {
            for x in 0..gw {
                let d = 2.0 * (v(x, y + 1, c) - 2.0 * v(x, y, c) + v(x, y - 1, c)) / n;
                g[idx(x, y + 1)][c] += d;
                g[idx(x, y)][c] -= 2.0 * d;
                g[idx(x, y - 1)][c] += d;
            }
        }
        for y in 0..gh.saturating_sub(1) {
            for x in 0..gw.saturating_sub(1) {
                let d = 4.0 * (v(x + 1, y + 1, c) - v(x + 1, y, c) - v(x, y + 1, c) + v(x, y, c)) / n;
                g[idx(x + 1, y + 1)][c] += d;
                g[idx(x + 1, y)][c] -= d;
                g[idx(x, y + 1)][c] -= d;
                g[idx(x, y)][c] += d;
            }
        }
    }
    g
}

/// Precomputed state for repeated loss evaluations on one frame pair.
pub(crate) struct Objective<'a> {
    moving: &'a [f64],
    width: usize,
    height: usize,
    map: BinMap,
    fixed_bins: Vec<(usize, [f64; 4])>,
    wx: AxisWeights,
    wy: AxisWeights,
    lambda: f64,
    steps: u32,
    grid: (usize, usize, usize),
}

impl<'a> Objective<'a> {
    pub fn new(fixed: &Frame, moving: &'a Frame, cfg: &RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        if !fixed.same_size(moving) {
            return Err(Error::Dimension(format!(
                "fixed is {}x{}, moving is {}x{}",
                fixed.width, fixed.height, moving.width, moving.height
            )));
        }
        check_unit_range(fixed, "fixed")?;
        check_unit_range(moving, "moving")?;
        let map = BinMap::new(cfg.bins, cfg.parzen_width)?;
        let fixed_bins = fixed
            .data
            .iter()
            .map(|v| {
                let (first, k, _) = map.footprint(map.coord(*v));
                (first, k)
            })
            .collect();
        let probe = ControlPointField::zeros(fixed.width, fixed.height, cfg.spacing);
        Ok(Objective {
            moving: &moving.data,
            width: fixed.width,
            height: fixed.height,
            map,
            fixed_bins,
            wx: AxisWeights::new(fixed.width, cfg.spacing),
            wy: AxisWeights::new(fixed.height, cfg.spacing),
            lambda: cfg.lambda_reg,
            steps: cfg.integration_steps,
            grid: (cfg.spacing, probe.grid_width, probe.grid_height),
        })
    }

    pub fn check(&self, cp: &ControlPointField) -> Result<()> {
        cp.validate()?;
        if (cp.spacing, cp.grid_width, cp.grid_height) != self.grid {
            return Err(Error::Dimension(format!(
                "control grid {}x{} at spacing {} does not match the {}x{} image at spacing {}",
                cp.grid_width, cp.grid_height, cp.spacing, self.width, self.height, self.grid.0
            )));
        }
        Ok(())
    }

    /// Loss terms and, on request, the gradient w.r.t. the control velocities.
    pub fn evaluate(&self, cp: &ControlPointField, with_gradient: bool) -> (LossTerms, Option<Vec<[f64; 2]>>) {
        let (w, h) = (self.width, self.height);
        let b = self.map.bins;
        let len = self.map.footprint_len();
        let dense = interpolate_with(cp, &self.wx, &self.wy);
        let levels = integrate_cached(&dense, self.steps);
        let disp = levels.last().expect("non-empty");

        let mut moving_bins = Vec::with_capacity(w * h);
        let mut hist = vec![0.0; b * b];
        let mut z = 0.0;
        for i in 0..w * h {
            let sx = (i % w) as f64 + disp.x[i];
            let sy = (i / w) as f64 + disp.y[i];
            let value = bilinear_sample_clamped(self.moving, w, h, sx, sy);
            let (mi, mk, mdk) = self.map.footprint(self.map.coord(value));
            let (fi, fk) = &self.fixed_bins[i];
            for a in 0..len {
                if fk[a] == 0.0 {
                    continue;
                }
                let row = (fi + a) * b + mi;
                for c in 0..len {
                    let v = fk[a] * mk[c];
                    hist[row + c] += v;
                    z += v;
                }
            }
            moving_bins.push((mi, mdk, sx, sy));
        }
        let p: Vec<f64> = hist.iter().map(|v| v / z).collect();
        let (nmi, grad_p) = nmi_with_gradient(&p, b);
        let bending = bending_energy(cp);
        let terms = LossTerms {
            nmi,
            bending,
            total: -nmi + self.lambda * bending,
        };
        if !with_gradient {
            return (terms, None);
        }

        // d(−NMI)/d(unnormalized bin), including the normalization by z
        let mean: f64 = grad_p.iter().zip(&p).map(|(g, q)| g * q).sum();
        let d_hist: Vec<f64> = grad_p.iter().map(|g| -(g - mean) / z).collect();

        let mut ax = vec![0.0; w * h];
        let mut ay = vec![0.0; w * h];
        for i in 0..w * h {
            let (mi, mdk, sx, sy) = moving_bins[i];
            let (fi, fk) = &self.fixed_bins[i];
            let mut d_value = 0.0;
            for a in 0..len {
                if fk[a] == 0.0 {
                    continue;
                }
                let row = (fi + a) * b + mi;
                for c in 0..len {
                    d_value += d_hist[row + c] * fk[a] * mdk[c];
                }
            }
            if d_value == 0.0 {
                continue;
            }
            d_value *= self.map.scale;
            let g = bilinear_gradient(self.moving, w, h, sx, sy);
            ax[i] = d_value * g[0];
            ay[i] = d_value * g[1];
        }
        let (gx, gy) = integrate_adjoint(&levels, ax, ay);
        let dense_grad: Vec<[f64; 2]> = gx.into_iter().zip(gy).map(|(a, b)| [a, b]).collect();
        let mut grad = interpolate_adjoint(&dense_grad, cp.grid_width, cp.grid_height, &self.wx, &self.wy);
        if self.lambda > 0.0 {
            for (g, r) in grad.iter_mut().zip(bending_energy_gradient(cp)) {
                g[0] += self.lambda * r[0];
                g[1] += self.lambda * r[1];
            }
        }
        (terms, Some(grad))
    }
}

/// `−NMI(fixed, moving ∘ ψ) + λ·bending_energy(cp)` with `ψ` the integrated
/// B-spline velocity field.
pub fn registration_loss(fixed: &Frame, moving: &Frame, cp: &ControlPointField, cfg: &RegistrationConfig) -> Result<LossTerms> {
    let obj = Objective::new(fixed, moving, cfg)?;
    obj.check(cp)?;
    Ok(obj.evaluate(cp, false).0)
}

/// Analytic gradient of [`registration_loss`] w.r.t. each control velocity.
pub fn loss_gradient(fixed: &Frame, moving: &Frame, cp: &ControlPointField, cfg: &RegistrationConfig) -> Result<Vec<[f64; 2]>> {
    let obj = Objective::new(fixed, moving, cfg)?;
    obj.check(cp)?;
    Ok(obj.evaluate(cp, true).1.expect("gradient requested"))
}
