//! Groupwise PCA denoising.
//!
//! The stack is viewed as a pixels × frames (Casorati) matrix, centered over
//! frames, and decomposed through the eigen-analysis of the small
//! frames × frames Gram matrix. Components covering the variance threshold
//! are kept, later components survive only when their score series across
//! frames is autocorrelated, and everything else is zeroed before the
//! stack is rebuilt.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Frame, FrameStack};

/// Eigenvalues below this fraction of the total variance are numerical zeros.
const RANK_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub variance_threshold: f64,
    pub autocorr_threshold: f64,
    pub autocorr_lag: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            variance_threshold: 0.97,
            autocorr_threshold: 0.5,
            autocorr_lag: 1,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "variance_threshold {} must lie in (0, 1]",
                self.variance_threshold
            )));
        }
        if !(self.autocorr_threshold.abs() <= 1.0) {
            return Err(Error::Config(format!(
                "autocorr_threshold {} must lie in [-1, 1]",
                self.autocorr_threshold
            )));
        }
        if self.autocorr_lag == 0 {
            return Err(Error::Config("autocorr_lag must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDecomposition {
    pub width: usize,
    pub height: usize,
    pub mean_frame: Vec<f64>,
    /// Unit-norm eigen-images, one per component.
    pub components: Vec<Vec<f64>>,
    /// `scores[k][f]`: coefficient of component `k` in frame `f`.
    pub scores: Vec<Vec<f64>>,
    /// Fraction of the total variance per component, non-increasing.
    pub variance_fraction: Vec<f64>,
    /// Set when every frame equals the mean (no variance to decompose).
    pub degenerate: bool,
    pub meta: Vec<crate::imaging::DiffusionMeta>,
    pub normalized: bool,
}

impl PcaDecomposition {
    pub fn n_frames(&self) -> usize {
        self.meta.len()
    }
}

pub fn pca_decompose(stack: &FrameStack) -> Result<PcaDecomposition> {
    let n = stack.len();
    if n < 2 {
        return Err(Error::Input("PCA needs at least 2 frames".into()));
    }
    let pixels = stack.width() * stack.height();
    let frames = stack.frames();

    let mut mean_frame = vec![0.0; pixels];
    for f in frames {
        for (m, v) in mean_frame.iter_mut().zip(&f.data) {
            *m += v;
        }
    }
    for m in &mut mean_frame {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.data.iter().zip(&mean_frame).map(|(v, m)| v - m).collect())
        .collect();

    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let total: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    let energy: f64 = frames.iter().flat_map(|f| &f.data).map(|v| v * v).sum();

    let base = PcaDecomposition {
        width: stack.width(),
        height: stack.height(),
        mean_frame,
        components: Vec::new(),
        scores: Vec::new(),
        variance_fraction: Vec::new(),
        degenerate: true,
        meta: frames.iter().map(|f| f.meta).collect(),
        normalized: stack.is_normalized(),
    };
    // rounding in the mean leaves residues far below this for identical frames
    if !(total > 1e-24 * energy) {
        return Ok(base);
    }

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in order.iter().take(n - 1) {
        let lambda = eig.eigenvalues[k];
        if lambda <= RANK_TOLERANCE * total {
            break;
        }
        let v = eig.eigenvectors.column(k);
        let inv = 1.0 / lambda.sqrt();
        let mut u = vec![0.0; pixels];
        for (f, c) in centered.iter().enumerate() {
            let w = v[f] * inv;
            for (ui, ci) in u.iter_mut().zip(c) {
                *ui += w * ci;
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut u {
            *x /= norm;
        }
        // sign convention: largest-magnitude entry positive
        let mut imax = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[imax].abs() {
                imax = i;
            }
        }
        if u[imax] < 0.0 {
            for x in &mut u {
                *x = -*x;
            }
        }
        components.push(u);
        eigenvalues.push(lambda);
    }
    let scores = components
        .iter()
        .map(|u| {
            centered
                .iter()
                .map(|c| u.iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let kept_total: f64 = eigenvalues.iter().sum();
    let variance_fraction = eigenvalues.iter().map(|l| l / kept_total).collect();

    Ok(PcaDecomposition {
        components,
        scores,
        variance_fraction,
        degenerate: false,
        ..base
    })
}

/// Pearson correlation between `series[..n-lag]` and `series[lag..]`.
pub fn lag_autocorrelation(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if lag == 0 || n <= lag + 1 {
        return Err(Error::Input(format!(
            "lag {lag} needs a series longer than {}, got {n}",
            lag + 1
        )));
    }
    let a = &series[..n - lag];
    let b = &series[lag..];
    let m = a.len() as f64;
    let ma = a.iter().sum::<f64>() / m;
    let mb = b.iter().sum::<f64>() / m;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput(
            "correlation is undefined for a constant series".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Keep-mask over components: the shortest variance prefix reaching the
/// threshold, plus any later component with autocorrelated scores.
pub fn select_components(dec: &PcaDecomposition, cfg: &DenoiseConfig) -> Vec<bool> {
    let n = dec.variance_fraction.len();
    let mut keep = vec![false; n];
    let mut cumulative = 0.0;
    let mut prefix = n;
    for (k, frac) in dec.variance_fraction.iter().enumerate() {
        cumulative += frac;
        keep[k] = true;
        if cumulative >= cfg.variance_threshold - 1e-12 {
            prefix = k + 1;
            break;
        }
    }
    for k in prefix..n {
        if let Ok(r) = lag_autocorrelation(&dec.scores[k], cfg.autocorr_lag) {
            if r.abs() >= cfg.autocorr_threshold {
                keep[k] = true;
            }
        }
    }
    keep
}

/// Rebuilds the stack from the mean frame and the kept components.
///
/// Negative reconstructed intensities are clamped to zero. The output keeps
/// the normalized flag only while its maximum stays within 1e-6 of one.
pub fn reconstruct_denoised(dec: &PcaDecomposition, keep: &[bool]) -> Result<FrameStack> {
    if keep.len() != dec.components.len() {
        return Err(Error::Dimension(format!(
            "keep-mask has {} entries for {} components",
            keep.len(),
            dec.components.len()
        )));
    }
    if !dec.components.is_empty() && !keep.iter().any(|k| *k) {
        return Err(Error::Input("at least one component must be kept".into()));
    }
    let frames = (0..dec.n_frames())
        .map(|f| {
            let mut data = dec.mean_frame.clone();
            for (k, u) in dec.components.iter().enumerate() {
                if !keep[k] {
                    continue;
                }
                let s = dec.scores[k][f];
                for (d, ui) in data.iter_mut().zip(u) {
                    *d += s * ui;
                }
            }
            for d in &mut data {
                *d = d.max(0.0);
            }
            Frame {
                width: dec.width,
                height: dec.height,
                data,
                meta: dec.meta[f],
            }
        })
        .collect::<Vec<Frame>>();
    let max = frames.iter().map(Frame::max).fold(0.0, f64::max);
    FrameStack::with_flag(frames, dec.normalized && (max - 1.0).abs() <= 1e-6)
}

/// Decompose, select, and reconstruct in one step.
pub fn denoise_stack(stack: &FrameStack, cfg: &DenoiseConfig) -> Result<(FrameStack, PcaDecomposition, Vec<bool>)> {
    cfg.validate()?;
    let dec = pca_decompose(stack)?;
    let keep = select_components(&dec, cfg);
    let out = reconstruct_denoised(&dec, &keep)?;
    Ok((out, dec, keep))
}

/// Diagnostic CSV: `component_index,variance_fraction,kept,score_0..score_{n-1}`.
pub fn diagnostics_csv(dec: &PcaDecomposition, keep: &[bool]) -> String {
    let mut out = String::from("component_index,variance_fraction,kept");
    for f in 0..dec.n_frames() {
        let _ = write!(out, ",score_{f}");
    }
    out.push('\n');
    for (k, frac) in dec.variance_fraction.iter().enumerate() {
        let _ = write!(out, "{k},{frac:.9},{}", keep.get(k).copied().unwrap_or(false));
        for s in &dec.scores[k] {
            let _ = write!(out, ",{s:.9}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::DiffusionMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stack_from(frames: Vec<Vec<f64>>, w: usize, h: usize) -> FrameStack {
        FrameStack::new(
            frames
                .into_iter()
                .map(|d| Frame::new(w, h, d, DiffusionMeta::reference()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn dec_with(fractions: Vec<f64>, scores: Vec<Vec<f64>>) -> PcaDecomposition {
        let n = scores[0].len();
        PcaDecomposition {
            width: 1,
            height: 1,
            mean_frame: vec![0.0],
            components: vec![vec![1.0]; fractions.len()],
            scores,
            variance_fraction: fractions,
            degenerate: false,
            meta: vec![DiffusionMeta::reference(); n],
            normalized: false,
        }
    }

    #[test]
    fn rank_one_two_frames() {
        let (w, h) = (4, 3);
        let a: Vec<f64> = (0..12).map(|i| 1.0 + i as f64).collect();
        let mut b: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        b.iter_mut().for_each(|x| *x /= nb);
        let second: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 0.5 * y).collect();
        let dec = pca_decompose(&stack_from(vec![a, second], w, h)).unwrap();
        assert_eq!(dec.components.len(), 1);
        assert!((dec.variance_fraction[0] - 1.0).abs() < 1e-12);
        let dot: f64 = dec.components[0].iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn identical_frames_are_flagged() {
        let f = vec![0.3, 0.5, 0.9, 0.1];
        let dec = pca_decompose(&stack_from(vec![f.clone(), f.clone(), f], 2, 2)).unwrap();
        assert!(dec.degenerate);
        assert!(dec.components.is_empty());
        let out = reconstruct_denoised(&dec, &[]).unwrap();
        for (a, b) in out.frames()[0].data.iter().zip([0.3, 0.5, 0.9, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn autocorrelation_examples() {
        let lin: Vec<f64> = (0..20).map(|i| 2.0 * i as f64 + 1.0).collect();
        assert!((lag_autocorrelation(&lin, 1).unwrap() - 1.0).abs() < 1e-9);
        let alt: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((lag_autocorrelation(&alt, 1).unwrap() + 1.0).abs() < 1e-12);
        assert!(lag_autocorrelation(&[2.0; 10], 1).is_err());
        assert!(lag_autocorrelation(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn white_noise_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
        // independent oracle: sample correlation of the two shifted halves
        let a = &s[..999];
        let b = &s[1..];
        let ma = a.iter().sum::<f64>() / 999.0;
        let mb = b.iter().sum::<f64>() / 999.0;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let oracle = cov / (va * vb).sqrt();
        let r = lag_autocorrelation(&s, 1).unwrap();
        assert!((r - oracle).abs() < 1e-12);
        assert!(r.abs() < 0.1, "{r}");
    }

    #[test]
    fn variance_prefix_rule() {
        let noise = vec![0.3, -0.2, 0.5, -0.4, 0.1, -0.3];
        let tail = vec![-0.3, -0.2, 0.3, -0.2, 0.0, 0.5];
        assert!(lag_autocorrelation(&tail, 1).unwrap().abs() < 0.5);
        let dec = dec_with(vec![0.90, 0.08, 0.02], vec![noise.clone(), noise.clone(), tail]);
        assert_eq!(select_components(&dec, &DenoiseConfig::default()), vec![true, true, false]);

        let single = dec_with(vec![1.0], vec![vec![1.0, 2.0, 0.5]]);
        assert_eq!(select_components(&single, &DenoiseConfig::default()), vec![true]);

        let trend: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert!(lag_autocorrelation(&trend, 1).unwrap() > 0.5);
        let rescued = dec_with(vec![0.95, 0.03, 0.02], vec![noise.clone(), noise, trend]);
        assert_eq!(select_components(&rescued, &DenoiseConfig::default()), vec![true, true, true]);
    }

    fn rank3_stack(w: usize, h: usize, n: usize, seed: u64) -> (FrameStack, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..w * h)
                    .map(|i| {
                        let (x, y) = ((i % w) as f64, (i / w) as f64);
                        match k {
                            0 => 1.0,
                            1 => (x / w as f64 * 3.0).sin().abs(),
                            _ => ((x - y) / h as f64).cos().abs(),
                        }
                    })
                    .collect()
            })
            .collect();
        let frames = (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
                (0..w * h).map(|i| (0..3).map(|k| s[k] * basis[k][i]).sum()).collect()
            })
            .collect();
        (stack_from(frames, w, h), basis)
    }

    #[test]
    fn rank3_decomposition_matches_construction() {
        let (stack, basis) = rank3_stack(16, 12, 10, 3);
        let dec = pca_decompose(&stack).unwrap();
        assert_eq!(dec.components.len(), 3);
        assert!(dec.variance_fraction.iter().all(|f| *f > 0.0));
        let sum: f64 = dec.variance_fraction.iter().sum();
        assert!((sum - 1.0).abs() < 1e-8);
        assert!(dec.variance_fraction.windows(2).all(|w| w[0] >= w[1]));
        // orthonormal components
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = dec.components[a].iter().zip(&dec.components[b]).map(|(x, y)| x * y).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        // oracle: each centered frame lies in the span of the components,
        // and the total variance equals the Frobenius norm of the centered matrix
        let mut frob = 0.0;
        for f in stack.frames() {
            let c: Vec<f64> = f.data.iter().zip(&dec.mean_frame).map(|(v, m)| v - m).collect();
            frob += c.iter().map(|x| x * x).sum::<f64>();
            let mut resid = c.clone();
            for u in &dec.components {
                let p: f64 = u.iter().zip(&c).map(|(x, y)| x * y).sum();
                for (r, ui) in resid.iter_mut().zip(u) {
                    *r -= p * ui;
                }
            }
            let rn = resid.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(rn <= 1e-9 * cn.max(1e-12));
        }
        let score_energy: f64 = dec.scores.iter().flatten().map(|s| s * s).sum();
        assert!((score_energy - frob).abs() < 1e-9 * frob);
        let _ = basis;
        let out = reconstruct_denoised(&dec, &[true, true, true]).unwrap();
        assert!(relative_error(&out, &stack) < 1e-6);
    }

    fn relative_error(a: &FrameStack, b: &FrameStack) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            for (x, y) in fa.data.iter().zip(&fb.data) {
                num += (x - y) * (x - y);
                den += y * y;
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn energy_ordering_and_scale_equivariance() {
        let (stack, _) = rank3_stack(10, 10, 8, 11);
        let dec = pca_decompose(&stack).unwrap();
        let e3 = relative_error(&reconstruct_denoised(&dec, &[true, true, true]).unwrap(), &stack);
        let e2 = relative_error(&reconstruct_denoised(&dec, &[true, true, false]).unwrap(), &stack);
        let e1 = relative_error(&reconstruct_denoised(&dec, &[true, false, false]).unwrap(), &stack);
        assert!(e1 >= e2 && e2 >= e3);

        let scaled = stack.map_frames(|f| Frame { data: f.data.iter().map(|v| v * 3.5).collect(), ..f.clone() }).unwrap();
        let cfg = DenoiseConfig::default();
        let (a, _, _) = denoise_stack(&stack, &cfg).unwrap();
        let (b, _, _) = denoise_stack(&scaled, &cfg).unwrap();
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            for (x, y) in fa.data.iter().zip(&fb.data) {
                assert!((x * 3.5 - y).abs() <= 1e-10 * y.abs().max(1.0));
            }
        }
        let (c, _, _) = denoise_stack(&stack, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn diagnostics_csv_layout() {
        let (stack, _) = rank3_stack(6, 6, 4, 1);
        let (_, dec, keep) = denoise_stack(&stack, &DenoiseConfig::default()).unwrap();
        let csv = diagnostics_csv(&dec, &keep);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "component_index,variance_fraction,kept,score_0,score_1,score_2,score_3");
        assert_eq!(lines.count(), dec.components.len());
    }

    #[test]
    fn config_validation() {
        assert!(DenoiseConfig { variance_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(DenoiseConfig { autocorr_threshold: 1.5, ..Default::default() }.validate().is_err());
        assert!(DenoiseConfig::default().validate().is_ok());
    }
}
