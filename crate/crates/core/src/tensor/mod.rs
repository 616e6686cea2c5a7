//! Log-linear diffusion tensor fitting and tensor quality metrics.

mod profile;
mod wall;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::bundle::{read_bundle, write_bundle, Bundle};
use crate::imaging::{DiffusionMeta, FrameStack, Mask};

pub use profile::{
    ha_gradient_stats, ha_line_profiles, is_included, linear_regression, stack_profile, HAProfile, HagSummary,
    Regression, StackProfile, DEPTH_STEP, MIN_PROFILE_SAMPLES,
};
pub use wall::{helix_angle, helix_angle_map, wall_coordinates, HelixAngleMap, WallCoordinates, SECTORS};

/// Symmetric diffusion tensor in mm²/s with its fitted unweighted signal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DiffusionTensor {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
    pub s0: f64,
}

impl DiffusionTensor {
    pub fn from_matrix(m: &Matrix3<f64>, s0: f64) -> Self {
        DiffusionTensor {
            dxx: m[(0, 0)],
            dyy: m[(1, 1)],
            dzz: m[(2, 2)],
            dxy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            dxz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            dyz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            s0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.dxx, self.dxy, self.dxz, //
            self.dxy, self.dyy, self.dyz, //
            self.dxz, self.dyz, self.dzz,
        )
    }

    /// `s0 · exp(−b gᵀDg)` for one acquisition.
    pub fn signal(&self, meta: &DiffusionMeta) -> f64 {
        let row = design_row(meta);
        let coef = self.coefficients();
        (row.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()).exp()
    }

    fn coefficients(&self) -> [f64; 7] {
        [self.s0.ln(), self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz]
    }
}

/// Per-pixel tensors with fit-success flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    pub width: usize,
    pub height: usize,
    pub tensors: Vec<DiffusionTensor>,
    pub valid: Vec<bool>,
}

/// Channels of a stored tensor map: six components, s0, then the valid flag.
const TENSOR_CHANNELS: usize = 8;

/// Stores a tensor map as a one-frame, eight-channel bundle
/// (`dxx dyy dzz dxy dxz dyz s0 valid`). Values are rounded to `f32`.
pub fn save_tensor_map(map: &TensorMap, path: &Path) -> Result<()> {
    let n = map.width * map.height;
    let mut data = Vec::with_capacity(TENSOR_CHANNELS * n);
    let planes: [fn(&DiffusionTensor) -> f64; 7] = [
        |t| t.dxx,
        |t| t.dyy,
        |t| t.dzz,
        |t| t.dxy,
        |t| t.dxz,
        |t| t.dyz,
        |t| t.s0,
    ];
    for plane in planes {
        data.extend(map.tensors.iter().map(|t| plane(t) as f32));
    }
    data.extend(map.valid.iter().map(|v| if *v { 1.0f32 } else { 0.0 }));
    write_bundle(
        &Bundle {
            width: map.width,
            height: map.height,
            frames: 1,
            channels: Some(TENSOR_CHANNELS),
            normalized: false,
            meta: Vec::new(),
            data,
        },
        path,
    )
}

pub fn load_tensor_map(path: &Path) -> Result<TensorMap> {
    let b = read_bundle(path)?;
    if b.frames != 1 || b.channels != Some(TENSOR_CHANNELS) {
        return Err(Error::format(0, "a tensor bundle must hold one eight-channel frame"));
    }
    let n = b.width * b.height;
    let c = |k: usize, i: usize| b.data[k * n + i] as f64;
    let tensors = (0..n)
        .map(|i| DiffusionTensor {
            dxx: c(0, i),
            dyy: c(1, i),
            dzz: c(2, i),
            dxy: c(3, i),
            dxz: c(4, i),
            dyz: c(5, i),
            s0: c(6, i),
        })
        .collect();
    Ok(TensorMap {
        width: b.width,
        height: b.height,
        tensors,
        valid: (0..n).map(|i| c(7, i) > 0.5).collect(),
    })
}

/// Row of the log-signal model `ln S = ln S0 − b gᵀDg` for unknowns
/// `(ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`.
pub fn design_row(meta: &DiffusionMeta) -> [f64; 7] {
    let b = meta.b_value;
    let [gx, gy, gz] = meta.direction;
    [
        1.0,
        -b * gx * gx,
        -b * gy * gy,
        -b * gz * gz,
        -2.0 * b * gx * gy,
        -2.0 * b * gx * gz,
        -2.0 * b * gy * gz,
    ]
}

/// Relative singular-value floor below which the design counts as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Pseudo-inverse of the column-scaled design, mapped back to unscaled unknowns.
fn design_pseudo_inverse(metas: &[DiffusionMeta]) -> Result<DMatrix<f64>> {
    if metas.len() < 7 {
        return Err(Error::Design(format!("{} frames cannot determine 7 unknowns", metas.len())));
    }
    if !metas.iter().any(|m| m.b_value == 0.0) {
        return Err(Error::Design("no b = 0 reference frame".into()));
    }
    for m in metas {
        m.validate()?;
    }
    let n = metas.len();
    let mut a = DMatrix::from_fn(n, 7, |r, c| design_row(&metas[r])[c]);
    let mut scale = [1.0; 7];
    for (c, s) in scale.iter_mut().enumerate() {
        let max = a.column(c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            *s = max;
            a.column_mut(c).iter_mut().for_each(|v| *v /= max);
        }
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min > RANK_TOLERANCE * max) {
        return Err(Error::Design(format!(
            "encoding directions do not span the tensor space (condition {:.3e})",
            max / min
        )));
    }
    let mut pinv = svd.pseudo_inverse(0.0).map_err(|e| Error::Design(e.to_string()))?;
    for (r, s) in scale.iter().enumerate() {
        pinv.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    Ok(pinv)
}

/// Unweighted least-squares log-linear fit over every frame, averages included
/// as separate rows. Pixels outside the mask or with any non-positive
/// intensity stay invalid.
pub fn fit_tensor(stack: &FrameStack, mask: &Mask) -> Result<TensorMap> {
    mask.check_matches(stack.width(), stack.height())?;
    let frames = stack.frames();
    let metas: Vec<DiffusionMeta> = frames.iter().map(|f| f.meta).collect();
    let pinv = design_pseudo_inverse(&metas)?;
    let (w, h) = (stack.width(), stack.height());
    let fitted: Vec<Option<DiffusionTensor>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if !mask.inside[i] {
                return None;
            }
            let mut logs = Vec::with_capacity(frames.len());
            for f in frames {
                let v = f.data[i];
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                logs.push(v.ln());
            }
            let mut coef = [0.0; 7];
            for (r, c) in coef.iter_mut().enumerate() {
                *c = pinv.row(r).iter().zip(&logs).map(|(p, l)| p * l).sum();
            }
            Some(DiffusionTensor {
                s0: coef[0].exp(),
                dxx: coef[1],
                dyy: coef[2],
                dzz: coef[3],
                dxy: coef[4],
                dxz: coef[5],
                dyz: coef[6],
            })
        })
        .collect();
    let valid = fitted.iter().map(Option::is_some).collect();
    let tensors = fitted.into_iter().map(Option::unwrap_or_default).collect();
    Ok(TensorMap {
        width: w,
        height: h,
        tensors,
        valid,
    })
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: [f64; 3],
    pub eigenvectors: [[f64; 3]; 3],
}

impl EigenSystem {
    pub fn primary(&self) -> [f64; 3] {
        self.eigenvectors[0]
    }
}

/// Symmetric eigen-decomposition; each eigenvector's largest-magnitude
/// component is made positive.
pub fn eigen_decompose(t: &DiffusionTensor) -> EigenSystem {
    let eig = SymmetricEigen::new(t.matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut eigenvalues = [0.0; 3];
    let mut eigenvectors = [[0.0; 3]; 3];
    for (k, &j) in order.iter().enumerate() {
        eigenvalues[k] = eig.eigenvalues[j];
        let col = eig.eigenvectors.column(j);
        let mut v = [col[0], col[1], col[2]];
        let lead = (0..3).fold(0, |m, i| if v[i].abs() > v[m].abs() { i } else { m });
        if v[lead] < 0.0 {
            v = v.map(|c| -c);
        }
        eigenvectors[k] = v;
    }
    EigenSystem {
        eigenvalues,
        eigenvectors,
    }
}

/// Pixels with exactly one, two and three negative eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct NegativeCounts {
    pub one: usize,
    pub two: usize,
    pub three: usize,
}

impl NegativeCounts {
    pub fn total(&self) -> usize {
        self.one + self.two + self.three
    }
}

/// Counts negative eigenvalues over valid pixels inside `mask`.
pub fn count_negative_eigenvalues(map: &TensorMap, mask: &Mask) -> Result<NegativeCounts> {
    mask.check_matches(map.width, map.height)?;
    let mut counts = NegativeCounts::default();
    for i in 0..map.tensors.len() {
        if !(map.valid[i] && mask.inside[i]) {
            continue;
        }
        match eigen_decompose(&map.tensors[i]).eigenvalues.iter().filter(|l| **l < 0.0).count() {
            1 => counts.one += 1,
            2 => counts.two += 1,
            3 => counts.three += 1,
            _ => {}
        }
    }
    Ok(counts)
}

/// Mean diffusivity and fractional anisotropy; FA of the zero tensor is 0.
pub fn tensor_invariants(t: &DiffusionTensor) -> (f64, f64) {
    let l = eigen_decompose(t).eigenvalues;
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm == 0.0 {
        return (md, 0.0);
    }
    let dev = ((l[0] - md).powi(2) + (l[1] - md).powi(2) + (l[2] - md).powi(2)).sqrt();
    (md, (1.5f64).sqrt() * dev / norm)
}
