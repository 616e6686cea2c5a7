use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::tensor::{eigen_decompose, TensorMap};

/// Angular sectors used to estimate the wall boundaries, centered at multiples of 10°.
pub const SECTORS: usize = 36;

/// Below this, both in-plane components of the primary eigenvector count as zero.
const HA_DEGENERACY: f64 = 1e-6;

/// Local cardiac frame per pixel. The longitudinal axis is the through-plane unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WallCoordinates {
    pub width: usize,
    pub height: usize,
    /// Centroid of the mask's hole, `(x, y)` in pixels.
    pub center: [f64; 2],
    pub radial: Vec<[f64; 2]>,
    pub circumferential: Vec<[f64; 2]>,
    /// 0 at the endocardium, 1 at the epicardium; meaningful inside the mask.
    pub depth: Vec<f64>,
    /// Innermost and outermost mask radius per sector.
    pub endo_radius: [f64; SECTORS],
    pub epi_radius: [f64; SECTORS],
}

impl WallCoordinates {
    fn interpolate(table: &[f64; SECTORS], angle: f64) -> f64 {
        let pos = angle.rem_euclid(2.0 * PI) / (2.0 * PI / SECTORS as f64);
        let k = pos.floor() as usize % SECTORS;
        let t = pos - pos.floor();
        table[k] * (1.0 - t) + table[(k + 1) % SECTORS] * t
    }

    /// Endocardial and epicardial radius at `angle` (radians), linear between sector centers.
    pub fn boundary_radii(&self, angle: f64) -> (f64, f64) {
        (
            Self::interpolate(&self.endo_radius, angle),
            Self::interpolate(&self.epi_radius, angle),
        )
    }
}

/// Non-mask pixels not 4-connected to the image border.
fn hole_pixels(mask: &Mask) -> Vec<usize> {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask.inside[i] {
                outside[i] = true;
                queue.push_back(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !mask.inside[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    (0..w * h).filter(|&i| !mask.inside[i] && !outside[i]).collect()
}

fn fill_empty_sectors(table: &mut [Option<f64>; SECTORS]) -> Result<[f64; SECTORS]> {
    let known: Vec<usize> = (0..SECTORS).filter(|k| table[*k].is_some()).collect();
    if known.is_empty() {
        return Err(Error::Topology("mask is empty".into()));
    }
    let mut out = [0.0; SECTORS];
    for k in 0..SECTORS {
        out[k] = match table[k] {
            Some(v) => v,
            None => {
                // linear in angle between the nearest filled sectors on each side
                let prev = (1..SECTORS).map(|d| (k + SECTORS - d) % SECTORS).find(|j| table[*j].is_some()).unwrap();
                let next = (1..SECTORS).map(|d| (k + d) % SECTORS).find(|j| table[*j].is_some()).unwrap();
                let dp = (k + SECTORS - prev) % SECTORS;
                let dn = (next + SECTORS - k) % SECTORS;
                let (a, b) = (table[prev].unwrap(), table[next].unwrap());
                a + (b - a) * dp as f64 / (dp + dn) as f64
            }
        };
    }
    Ok(out)
}

/// Radial, circumferential and transmural-depth coordinates from an annular mask.
pub fn wall_coordinates(mask: &Mask) -> Result<WallCoordinates> {
    let (w, h) = (mask.width, mask.height);
    if mask.count() == 0 {
        return Err(Error::Topology("mask is empty".into()));
    }
    let hole = hole_pixels(mask);
    if hole.is_empty() {
        return Err(Error::Topology("mask has no enclosed hole (no left-ventricular cavity)".into()));
    }
    let n = hole.len() as f64;
    let cx = hole.iter().map(|i| (i % w) as f64).sum::<f64>() / n;
    let cy = hole.iter().map(|i| (i / w) as f64).sum::<f64>() / n;

    let sector_width = 2.0 * PI / SECTORS as f64;
    let mut endo: [Option<f64>; SECTORS] = [None; SECTORS];
    let mut epi: [Option<f64>; SECTORS] = [None; SECTORS];
    let mut radial = Vec::with_capacity(w * h);
    let mut circumferential = Vec::with_capacity(w * h);
    let mut polar = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
        let r = dx.hypot(dy);
        let theta = dy.atan2(dx);
        let e = if r > 0.0 { [dx / r, dy / r] } else { [1.0, 0.0] };
        radial.push(e);
        circumferential.push([-e[1], e[0]]);
        polar.push((r, theta));
        if mask.inside[i] {
            let k = (theta.rem_euclid(2.0 * PI) / sector_width).round() as usize % SECTORS;
            endo[k] = Some(endo[k].map_or(r, |v: f64| v.min(r)));
            epi[k] = Some(epi[k].map_or(r, |v: f64| v.max(r)));
        }
    }
    let endo_radius = fill_empty_sectors(&mut endo)?;
    let epi_radius = fill_empty_sectors(&mut epi)?;
    let mut coords = WallCoordinates {
        width: w,
        height: h,
        center: [cx, cy],
        radial,
        circumferential,
        depth: Vec::new(),
        endo_radius,
        epi_radius,
    };
    coords.depth = polar
        .iter()
        .map(|&(r, theta)| {
            let (re, rp) = coords.boundary_radii(theta);
            if rp - re <= 1e-9 {
                0.5
            } else {
                ((r - re) / (rp - re)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(coords)
}

/// Helix angle in degrees of a primary eigenvector against the local
/// circumferential direction, in `(−90, 90]`. `None` when the vector has no
/// circumferential or longitudinal component.
pub fn helix_angle(e1: [f64; 3], circumferential: [f64; 2]) -> Option<f64> {
    let mut c = e1[0] * circumferential[0] + e1[1] * circumferential[1];
    let mut z = e1[2];
    if c.abs() < HA_DEGENERACY && z.abs() < HA_DEGENERACY {
        return None;
    }
    if c < 0.0 || (c == 0.0 && z < 0.0) {
        c = -c;
        z = -z;
    }
    Some(z.atan2(c).to_degrees())
}

/// Helix angles of valid fitted pixels inside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HelixAngleMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<f64>>,
}

pub fn helix_angle_map(map: &TensorMap, coords: &WallCoordinates, mask: &Mask) -> Result<HelixAngleMap> {
    mask.check_matches(map.width, map.height)?;
    if coords.width != map.width || coords.height != map.height {
        return Err(Error::Dimension("wall coordinates do not match the tensor map".into()));
    }
    let values = (0..map.tensors.len())
        .map(|i| {
            if !(map.valid[i] && mask.inside[i]) {
                return None;
            }
            helix_angle(eigen_decompose(&map.tensors[i]).primary(), coords.circumferential[i])
        })
        .collect();
    Ok(HelixAngleMap {
        width: map.width,
        height: map.height,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn annulus(n: usize, r_in: f64, r_out: f64) -> Mask {
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
    fn annulus_depth_and_frame() {
        let mask = annulus(64, 10.0, 20.0);
        let wc = wall_coordinates(&mask).unwrap();
        assert!((wc.center[0] - 31.5).abs() < 1e-12 && (wc.center[1] - 31.5).abs() < 1e-12);
        for i in 0..64 * 64 {
            let (r, c) = (wc.radial[i], wc.circumferential[i]);
            assert!((r[0] * c[0] + r[1] * c[1]).abs() < 1e-8);
            if mask.inside[i] {
                assert!((0.0..=1.0).contains(&wc.depth[i]));
                let rad = ((i % 64) as f64 - 31.5).hypot((i / 64) as f64 - 31.5);
                if (rad - 15.0).abs() < 0.5 {
                    let analytic = (rad - 10.0) / 10.0;
                    assert!((wc.depth[i] - analytic).abs() <= 0.05, "{} vs {analytic}", wc.depth[i]);
                }
            }
        }
        // circumferential is radial rotated by +90°
        let right = 31 * 64 + 60;
        assert_eq!(wc.radial[right].map(f64::signum), [1.0, -1.0]);
        assert!(wc.circumferential[right][1] > 0.99);
    }

    #[test]
    fn mask_without_hole_is_rejected() {
        let disc = annulus(32, 0.0, 10.0);
        assert!(matches!(wall_coordinates(&disc), Err(Error::Topology(_))));
        let empty = Mask::new(8, 8, vec![false; 64]).unwrap();
        assert!(matches!(wall_coordinates(&empty), Err(Error::Topology(_))));
        // a C-shaped wall open to the border has no enclosed cavity
        let mut open = annulus(48, 8.0, 14.0);
        for x in 24..48 {
            for y in 22..26 {
                open.inside[y * 48 + x] = false;
            }
        }
        assert!(matches!(wall_coordinates(&open), Err(Error::Topology(_))));
    }

    #[test]
    fn helix_angle_examples() {
        let c = [0.0, 1.0];
        assert_eq!(helix_angle([0.0, 1.0, 0.0], c), Some(0.0));
        assert_eq!(helix_angle([0.0, -1.0, 0.0], c), Some(0.0));
        let s = 0.5f64.sqrt();
        assert!((helix_angle([0.0, s, s], c).unwrap() - 45.0).abs() < 1e-12);
        assert!((helix_angle([0.0, -s, s], c).unwrap() + 45.0).abs() < 1e-12);
        assert_eq!(helix_angle([0.0, 0.0, -1.0], c), Some(90.0));
        assert_eq!(helix_angle([1.0, 0.0, 0.0], c), None);
        let a = 37f64.to_radians();
        let v = [0.0, a.cos(), a.sin()];
        assert!((helix_angle(v, c).unwrap() - 37.0).abs() < 1e-12);
    }
}
