//! Parzen-windowed joint histograms and normalized mutual information.

use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::registration::bspline::{cubic_kernel, cubic_kernel_derivative};
use crate::registration::RegistrationConfig;

/// NMI reported when the joint entropy vanishes (one occupied bin).
pub const NMI_CEILING: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major `weights[fixed_bin * bins + moving_bin]`, summing to 1.
    pub weights: Vec<f64>,
}

impl JointHistogram {
    pub fn get(&self, fixed_bin: usize, moving_bin: usize) -> f64 {
        self.weights[fixed_bin * self.bins + moving_bin]
    }

    pub fn transposed(&self) -> JointHistogram {
        let b = self.bins;
        let mut weights = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                weights[j * b + i] = self.weights[i * b + j];
            }
        }
        JointHistogram { bins: b, weights }
    }

    pub fn fixed_marginal(&self) -> Vec<f64> {
        self.weights.chunks(self.bins).map(|r| r.iter().sum()).collect()
    }

    pub fn moving_marginal(&self) -> Vec<f64> {
        let b = self.bins;
        (0..b).map(|j| (0..b).map(|i| self.weights[i * b + j]).sum()).collect()
    }
}

/// Maps normalized intensities onto continuous bin coordinates.
///
/// A margin of `ceil(2 × width)` bins on each side keeps every kernel
/// footprint inside the histogram.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BinMap {
    pub bins: usize,
    pub width: f64,
    pub offset: f64,
    pub scale: f64,
}

impl BinMap {
    pub fn new(bins: usize, parzen_width: f64) -> Result<Self> {
        if bins < 8 {
            return Err(Error::Config(format!("at least 8 bins required, got {bins}")));
        }
        if !(0.0..=1.0).contains(&parzen_width) {
            return Err(Error::Config(format!(
                "Parzen width must lie in [0, 1] bins, got {parzen_width}"
            )));
        }
        let margin = (2.0 * parzen_width).ceil();
        let span = bins as f64 - 1.0 - 2.0 * margin;
        if span <= 0.0 {
            return Err(Error::Config(format!(
                "Parzen width {parzen_width} leaves no room in {bins} bins"
            )));
        }
        Ok(BinMap {
            bins,
            width: parzen_width,
            offset: margin,
            scale: span,
        })
    }

    #[inline]
    pub fn coord(&self, intensity: f64) -> f64 {
        self.offset + intensity * self.scale
    }

    pub fn is_hard(&self) -> bool {
        self.width == 0.0
    }

    /// First bin touched by a kernel centered at `c`, with kernel values and
    /// derivatives (w.r.t. `c`) for up to four consecutive bins.
    #[inline]
    pub fn footprint(&self, c: f64) -> (usize, [f64; 4], [f64; 4]) {
        if self.is_hard() {
            let b = (c.round() as usize).min(self.bins - 1);
            return (b, [1.0, 0.0, 0.0, 0.0], [0.0; 4]);
        }
        let first = ((c - 2.0 * self.width).floor() + 1.0).max(0.0) as usize;
        let mut k = [0.0; 4];
        let mut dk = [0.0; 4];
        for (t, (kv, dv)) in k.iter_mut().zip(dk.iter_mut()).enumerate() {
            let bin = first + t;
            if bin >= self.bins {
                break;
            }
            let z = (c - bin as f64) / self.width;
            *kv = cubic_kernel(z);
            *dv = cubic_kernel_derivative(z) / self.width;
        }
        (first, k, dk)
    }

    /// Number of consecutive bins a single footprint may cover.
    pub fn footprint_len(&self) -> usize {
        if self.is_hard() {
            1
        } else {
            ((4.0 * self.width).ceil() as usize).clamp(1, 4)
        }
    }
}

pub(crate) fn check_unit_range(frame: &Frame, role: &str) -> Result<()> {
    if let Some(v) = frame.data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0 + 1e-9)) {
        return Err(Error::Precondition(format!(
            "{role} intensity {v} outside [0, 1]; normalize the stack first"
        )));
    }
    Ok(())
}

/// Unnormalized accumulation shared by the public histogram and the loss.
pub(crate) fn accumulate(fixed: &[f64], moving: &[f64], map: &BinMap) -> (Vec<f64>, f64) {
    let b = map.bins;
    let len = map.footprint_len();
    let mut h = vec![0.0; b * b];
    let mut total = 0.0;
    for (f, m) in fixed.iter().zip(moving) {
        let (fi, fk, _) = map.footprint(map.coord(*f));
        let (mi, mk, _) = map.footprint(map.coord(*m));
        for a in 0..len {
            if fk[a] == 0.0 {
                continue;
            }
            let row = (fi + a) * b;
            for c in 0..len {
                let v = fk[a] * mk[c];
                h[row + mi + c] += v;
                total += v;
            }
        }
    }
    (h, total)
}

/// Joint histogram with a separable cubic B-spline Parzen window of
/// `cfg.parzen_width` bins; a width of zero gives hard binning.
pub fn joint_histogram_parzen(fixed: &Frame, moving: &Frame, cfg: &RegistrationConfig) -> Result<JointHistogram> {
    let (bins, parzen_width) = (cfg.bins, cfg.parzen_width);
    if !fixed.same_size(moving) {
        return Err(Error::Dimension("fixed and moving frames differ in size".into()));
    }
    check_unit_range(fixed, "fixed")?;
    check_unit_range(moving, "moving")?;
    let map = BinMap::new(bins, parzen_width)?;
    let (mut weights, total) = accumulate(&fixed.data, &moving.data, &map);
    for w in &mut weights {
        *w /= total;
    }
    Ok(JointHistogram { bins, weights })
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Entropies `(H(F), H(M), H(F,M))` with natural logarithms.
pub fn entropies(hist: &JointHistogram) -> (f64, f64, f64) {
    (
        entropy(&hist.fixed_marginal()),
        entropy(&hist.moving_marginal()),
        entropy(&hist.weights),
    )
}

/// `(H(F) + H(M)) / H(F,M)`; [`NMI_CEILING`] when the joint entropy is zero.
pub fn nmi(hist: &JointHistogram) -> f64 {
    let (hf, hm, hj) = entropies(hist);
    if hj <= 0.0 {
        return NMI_CEILING;
    }
    (hf + hm) / hj
}

/// NMI and its gradient w.r.t. each normalized histogram weight.
pub(crate) fn nmi_with_gradient(p: &[f64], bins: usize) -> (f64, Vec<f64>) {
    let hist = JointHistogram {
        bins,
        weights: p.to_vec(),
    };
    let pf = hist.fixed_marginal();
    let pm = hist.moving_marginal();
    let (hf, hm, hj) = (entropy(&pf), entropy(&pm), entropy(p));
    if hj <= 0.0 {
        return (NMI_CEILING, vec![0.0; p.len()]);
    }
    let value = (hf + hm) / hj;
    let mut grad = vec![0.0; p.len()];
    for i in 0..bins {
        for j in 0..bins {
            let pij = p[i * bins + j];
            if pij <= 0.0 {
                // no sample touches this bin, so its weight has no derivative path
                continue;
            }
            let d_marg = -(pf[i].ln() + 1.0) - (pm[j].ln() + 1.0);
            let d_joint = -(pij.ln() + 1.0);
            grad[i * bins + j] = (d_marg - value * d_joint) / hj;
        }
    }
    (value, grad)
}
