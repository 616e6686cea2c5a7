use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{FrameStack, GrayImage};
use crate::tensor::{HelixAngleMap, WallCoordinates};

/// Transmural depth increment between spoke samples.
pub const DEPTH_STEP: f64 = 0.1;
/// Profiles with fewer samples are discarded.
pub const MIN_PROFILE_SAMPLES: usize = 4;
/// Search radius in pixels for the nearest valid pixel to a spoke point.
const SEARCH_RADIUS: f64 = 2.0;

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub rmse: f64,
}

/// `y = slope·x + intercept` by OLS. R² is 1 for a constant `y` fitted
/// exactly and 0 for a constant `y` with residuals; RMSE divides by `n`.
pub fn linear_regression(samples: &[(f64, f64)]) -> Result<Regression> {
    if samples.len() < 2 {
        return Err(Error::Regression(format!("{} samples, need at least 2", samples.len())));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Regression("all x values are identical".into()));
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = samples.iter().map(|s| (s.1 - slope * s.0 - intercept).powi(2)).sum();
    let ss_tot: f64 = samples.iter().map(|s| (s.1 - my).powi(2)).sum();
    let scale: f64 = samples.iter().map(|s| s.1 * s.1).sum::<f64>().max(f64::MIN_POSITIVE);
    let r_squared = if ss_tot <= 1e-24 * scale {
        if ss_res <= 1e-24 * scale {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Regression {
        slope,
        intercept,
        r_squared,
        rmse: (ss_res / n).sqrt(),
    })
}

/// Inclusion rule for helix-angle profiles: a strictly negative slope and R² strictly above 0.3.
pub fn is_included(slope: f64, r_squared: f64) -> bool {
    slope < 0.0 && r_squared > 0.3
}

/// Helix angle along one transmural spoke.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HAProfile {
    /// Spoke direction in radians from the +x axis.
    pub angle: f64,
    /// `(depth, helix angle in degrees)` pairs.
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    pub r_squared: f64,
    pub rmse: f64,
    pub included: bool,
}

fn nearest_valid(ha: &HelixAngleMap, x: f64, y: f64) -> Option<usize> {
    let (w, h) = (ha.width as i64, ha.height as i64);
    let reach = SEARCH_RADIUS.ceil() as i64;
    let (rx, ry) = (x.round() as i64, y.round() as i64);
    let mut best: Option<(f64, usize)> = None;
    for py in (ry - reach).max(0)..=(ry + reach).min(h - 1) {
        for px in (rx - reach).max(0)..=(rx + reach).min(w - 1) {
            let i = (py * w + px) as usize;
            if ha.values[i].is_none() {
                continue;
            }
            let d = (px as f64 - x).hypot(py as f64 - y);
            if d <= SEARCH_RADIUS && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Samples `n_spokes` uniformly spaced spokes from the LV center at depth
/// steps of [`DEPTH_STEP`], taking the nearest valid pixel to each point.
/// Each sample pairs that pixel's depth with its helix angle.
pub fn ha_line_profiles(ha: &HelixAngleMap, coords: &WallCoordinates, n_spokes: usize) -> Result<Vec<HAProfile>> {
    if n_spokes == 0 {
        return Err(Error::Input("at least one spoke is required".into()));
    }
    if coords.width != ha.width || coords.height != ha.height {
        return Err(Error::Dimension("wall coordinates do not match the helix-angle map".into()));
    }
    let steps = (1.0 / DEPTH_STEP).round() as usize;
    let mut profiles = Vec::with_capacity(n_spokes);
    for k in 0..n_spokes {
        let angle = 2.0 * PI * k as f64 / n_spokes as f64;
        let (re, rp) = coords.boundary_radii(angle);
        let mut visited = Vec::new();
        let mut samples = Vec::new();
        for s in 0..=steps {
            let r = re + (rp - re) * s as f64 * DEPTH_STEP;
            let x = coords.center[0] + r * angle.cos();
            let y = coords.center[1] + r * angle.sin();
            if let Some(i) = nearest_valid(ha, x, y) {
                if !visited.contains(&i) {
                    visited.push(i);
                    samples.push((coords.depth[i], ha.values[i].expect("valid pixel")));
                }
            }
        }
        if samples.len() < MIN_PROFILE_SAMPLES {
            continue;
        }
        let Ok(fit) = linear_regression(&samples) else { continue };
        profiles.push(HAProfile {
            angle,
            samples,
            slope: fit.slope,
            r_squared: fit.r_squared,
            rmse: fit.rmse,
            included: is_included(fit.slope, fit.r_squared),
        });
    }
    Ok(profiles)
}

/// Mean and sample standard deviation of R² and RMSE over included profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HagSummary {
    pub n_profiles: usize,
    pub n_included: usize,
    /// `None` when no profile is included.
    pub r2_mean: Option<f64>,
    pub r2_sd: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_sd: Option<f64>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

pub fn ha_gradient_stats(profiles: &[HAProfile]) -> HagSummary {
    let included: Vec<&HAProfile> = profiles.iter().filter(|p| is_included(p.slope, p.r_squared)).collect();
    let r2: Vec<f64> = included.iter().map(|p| p.r_squared).collect();
    let rmse: Vec<f64> = included.iter().map(|p| p.rmse).collect();
    let (r2_mean, r2_sd) = mean_sd(&r2);
    let (rmse_mean, rmse_sd) = mean_sd(&rmse);
    HagSummary {
        n_profiles: profiles.len(),
        n_included: included.len(),
        r2_mean,
        r2_sd,
        rmse_mean,
        rmse_sd,
    }
}

/// Central rows and central columns of every frame, stacked frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StackProfile {
    /// `frames × width`: row i is the central row of frame i.
    pub horizontal: GrayImage,
    /// `frames × height`: row i is the central column of frame i.
    pub vertical: GrayImage,
}

pub fn stack_profile(stack: &FrameStack) -> Result<StackProfile> {
    if stack.is_empty() {
        return Err(Error::Input("stack is empty".into()));
    }
    let (w, h) = (stack.width(), stack.height());
    let (row, col) = (h / 2, w / 2);
    let mut horizontal = Vec::with_capacity(stack.len() * w);
    let mut vertical = Vec::with_capacity(stack.len() * h);
    for f in stack.frames() {
        horizontal.extend_from_slice(&f.data[row * w..(row + 1) * w]);
        vertical.extend((0..h).map(|y| f.data[y * w + col]));
    }
    Ok(StackProfile {
        horizontal: GrayImage::new(w, stack.len(), horizontal)?,
        vertical: GrayImage::new(h, stack.len(), vertical)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{DiffusionMeta, Frame, Mask};
    use crate::registration::shift_frame;
    use crate::tensor::wall_coordinates;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn annulus(n: usize, r_in: f64, r_out: f64) -> Mask {
        let c = (n as f64 - 1.0) / 2.0;
        let inside = (0..n * n)
            .map(|i| {
                let r = ((i % n) as f64 - c).hypot((i / n) as f64 - c);
                r >= r_in && r <= r_out
            })
            .collect();
        Mask::new(n, n, inside).unwrap()
    }

    #[test]
    fn regression_examples() {
        let line: Vec<(f64, f64)> = (0..11).map(|i| (i as f64 / 10.0, -120.0 * i as f64 / 10.0 + 60.0)).collect();
        let r = linear_regression(&line).unwrap();
        assert!((r.slope + 120.0).abs() < 1e-10 && (r.intercept - 60.0).abs() < 1e-10);
        assert!((r.r_squared - 1.0).abs() < 1e-12 && r.rmse < 1e-10);

        let two = linear_regression(&[(0.3, 7.0), (0.9, -2.0)]).unwrap();
        assert!((two.r_squared - 1.0).abs() < 1e-12 && two.rmse < 1e-12);

        assert!(matches!(linear_regression(&[(1.0, 2.0), (1.0, 3.0)]), Err(Error::Regression(_))));
        assert!(linear_regression(&[(1.0, 2.0)]).is_err());

        let flat = linear_regression(&[(0.0, 30.0), (0.5, 30.0), (1.0, 30.0)]).unwrap();
        assert_eq!((flat.slope, flat.r_squared, flat.rmse), (0.0, 1.0, 0.0));
    }

    #[test]
    fn regression_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let samples: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 / 99.0, rng.random_range(-1.0..1.0))).collect();
        let r = linear_regression(&samples).unwrap();
        // oracle: normal-equations solve written independently
        let n = samples.len() as f64;
        let (sx, sy) = samples.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0, a.1 + s.1));
        let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0 * s.0, a.1 + s.0 * s.1));
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        let ss_res: f64 = samples.iter().map(|s| (s.1 - slope * s.0 - intercept).powi(2)).sum();
        let ss_tot: f64 = samples.iter().map(|s| (s.1 - sy / n).powi(2)).sum();
        assert!((r.slope - slope).abs() < 1e-10);
        assert!((r.r_squared - (1.0 - ss_res / ss_tot)).abs() < 1e-10);
        assert!(r.r_squared < 0.1);
    }

    #[test]
    fn inclusion_truth_table() {
        let eps = 1e-12;
        for slope in [-eps, 0.0, eps] {
            for r2 in [0.3 - eps, 0.3, 0.3 + eps] {
                assert_eq!(is_included(slope, r2), slope < 0.0 && r2 > 0.3, "{slope} {r2}");
            }
        }
        assert!(is_included(-eps, 0.3 + eps));
        assert!(!is_included(-eps, 0.3));
        assert!(!is_included(0.0, 0.3 + eps));
        assert!(is_included(-120.0, 0.95));
        assert!(!is_included(50.0, 0.9));
        assert!(!is_included(-80.0, 0.2));
    }

    fn profile(slope: f64, r2: f64, rmse: f64) -> HAProfile {
        HAProfile { angle: 0.0, samples: vec![], slope, r_squared: r2, rmse, included: is_included(slope, r2) }
    }

    #[test]
    fn summary_over_included_only() {
        let ps = vec![profile(-120.0, 0.95, 2.0), profile(50.0, 0.9, 1.0), profile(-80.0, 0.2, 9.0), profile(-100.0, 0.85, 4.0)];
        let s = ha_gradient_stats(&ps);
        assert_eq!((s.n_profiles, s.n_included), (4, 2));
        assert!((s.r2_mean.unwrap() - 0.9).abs() < 1e-12);
        // sample sd of {0.95, 0.85}: sqrt(2 · 0.05² / 1)
        assert!((s.r2_sd.unwrap() - (2.0f64 * 0.0025).sqrt()).abs() < 1e-12);
        assert!((s.rmse_mean.unwrap() - 3.0).abs() < 1e-12);
        let empty = ha_gradient_stats(&[profile(10.0, 0.9, 1.0)]);
        assert_eq!((empty.n_included, empty.r2_mean, empty.rmse_sd), (0, None, None));
        let single = ha_gradient_stats(&[profile(-1.0, 0.5, 1.0)]);
        assert_eq!(single.r2_sd, Some(0.0));
    }

    fn ha_field(mask: &Mask, f: impl Fn(f64) -> f64, coords: &WallCoordinates) -> HelixAngleMap {
        HelixAngleMap {
            width: mask.width,
            height: mask.height,
            values: (0..mask.inside.len()).map(|i| mask.inside[i].then(|| f(coords.depth[i]))).collect(),
        }
    }

    #[test]
    fn constant_field_gives_flat_profiles() {
        let mask = annulus(64, 12.0, 24.0);
        let wc = wall_coordinates(&mask).unwrap();
        let ha = ha_field(&mask, |_| 30.0, &wc);
        let ps = ha_line_profiles(&ha, &wc, 72).unwrap();
        assert_eq!(ps.len(), 72);
        for p in &ps {
            assert!(p.samples.len() >= MIN_PROFILE_SAMPLES);
            assert!(p.samples.iter().all(|s| s.1 == 30.0));
            assert_eq!(p.slope, 0.0);
            assert!(!p.included);
        }
        assert!(ha_line_profiles(&ha, &wc, 0).is_err());
    }

    #[test]
    fn linear_field_is_recovered_exactly() {
        let mask = annulus(64, 12.0, 24.0);
        let wc = wall_coordinates(&mask).unwrap();
        let ha = ha_field(&mask, |d| 60.0 - 120.0 * d, &wc);
        let ps = ha_line_profiles(&ha, &wc, 72).unwrap();
        assert_eq!(ps.len(), 72);
        for p in &ps {
            assert!((p.slope + 120.0).abs() < 1e-9 && p.included);
        }
    }

    #[test]
    fn stack_profile_examples() {
        let n = 16;
        let base: Vec<f64> = (0..n * n).map(|i| ((i % n) as f64 * 0.7).sin().abs() + (i / n) as f64 * 0.01).collect();
        let f = Frame::new(n, n, base, DiffusionMeta::reference()).unwrap();
        let same = stack_profile(&FrameStack::new(vec![f.clone(); 4]).unwrap()).unwrap();
        for r in 1..4 {
            assert_eq!(same.horizontal.row(r), same.horizontal.row(0));
            assert_eq!(same.vertical.row(r), same.vertical.row(0));
        }
        // frame i has its content moved right by i pixels
        let shifted: Vec<Frame> = (0..4).map(|i| shift_frame(&f, -(i as i64), 0)).collect();
        let sp = stack_profile(&FrameStack::new(shifted.clone()).unwrap()).unwrap();
        for r in 1..4 {
            for x in r..n {
                assert_eq!(sp.horizontal.row(r)[x], sp.horizontal.row(0)[x - r]);
            }
        }
        let realigned: Vec<Frame> = shifted.iter().enumerate().map(|(i, g)| shift_frame(g, i as i64, 0)).collect();
        let after = stack_profile(&FrameStack::new(realigned).unwrap()).unwrap();
        assert!(after.horizontal.column_variance_sum() < sp.horizontal.column_variance_sum());
    }
}
