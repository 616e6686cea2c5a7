use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{select_fixed_frame, DisplacementField, Frame, FrameStack};
use crate::registration::loss::{LossTerms, Objective};
use crate::registration::svf::warp_unchecked;
use crate::registration::{histogram_match, integrate_svf, interpolate_velocity, ControlPointField, RegistrationConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-12;
/// Iterations over which the best loss must improve by `convergence_tol`.
const PATIENCE: usize = 10;
/// Gaussian blur (px) applied to both images at each coarse-to-fine level; the last level is unblurred.
pub const SMOOTHING_SCHEDULE: [f64; 3] = [2.0, 1.0, 0.0];

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// Index into [`SMOOTHING_SCHEDULE`].
    pub level: usize,
    pub nmi_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iteration: usize, level: usize, terms: &LossTerms) -> Self {
        LossRecord {
            iteration,
            level,
            nmi_term: terms.nmi_term(),
            reg_term: terms.reg_term(),
            total: terms.total,
        }
    }
}

/// Registration result for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub control: ControlPointField,
    pub displacement: DisplacementField,
    pub trace: Vec<LossRecord>,
}

impl PairResult {
    /// Lowest loss seen at the unblurred level, which is the loss of the returned field.
    pub fn best_loss(&self) -> f64 {
        let last = SMOOTHING_SCHEDULE.len() - 1;
        self.trace
            .iter()
            .filter(|r| r.level == last)
            .map(|r| r.total)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Separable Gaussian blur with clamped borders, truncated at 3 sigma.
fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (frame.width as i64, frame.height as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| {
                        let j = if horizontal {
                            y * w + (x + d).clamp(0, w - 1)
                        } else {
                            (y + d).clamp(0, h - 1) * w + x
                        };
                        k * src[j as usize]
                    })
                    .sum()
            })
            .collect()
    };
    let data = pass(&pass(&frame.data, true), false);
    let mut out = frame.clone();
    out.data = data;
    out
}

/// Adam-style descent on the control velocities from a zero field.
///
/// Runs once per entry of [`SMOOTHING_SCHEDULE`] on blurred copies of both
/// images, each level starting from the previous level's best field. Each
/// level stops on its own after `max_iterations` or on convergence. Each
/// parameter moves by at most about `step_size` px per iteration. The best
/// iterate of the unblurred level is returned with its integrated displacement.
pub fn optimize_registration(fixed: &Frame, moving: &Frame, cfg: &RegistrationConfig) -> Result<PairResult> {
    // validates configuration and sizes before any blurring
    Objective::new(fixed, moving, cfg)?;
    let mut state = Adam::new(ControlPointField::zeros(fixed.width, fixed.height, cfg.spacing));
    let mut trace = Vec::with_capacity(SMOOTHING_SCHEDULE.len() * (cfg.max_iterations + 1));
    for (level, sigma) in SMOOTHING_SCHEDULE.iter().enumerate() {
        let (f, m) = (gaussian_blur(fixed, *sigma), gaussian_blur(moving, *sigma));
        let objective = Objective::new(&f, &m, cfg)?;
        descend(&objective, &mut state, cfg, level, &mut trace)?;
    }
    let cp = state.cp;
    let dense = interpolate_velocity(&cp, fixed.width, fixed.height)?;
    let displacement = integrate_svf(&dense, cfg.integration_steps)?;
    Ok(PairResult {
        control: cp,
        displacement,
        trace,
    })
}

/// Optimizer state shared by the levels; moment estimates carry over.
struct Adam {
    cp: ControlPointField,
    m: Vec<[f64; 2]>,
    v: Vec<[f64; 2]>,
    t: i32,
}

impl Adam {
    fn new(cp: ControlPointField) -> Self {
        let n = cp.len();
        Adam {
            cp,
            m: vec![[0.0; 2]; n],
            v: vec![[0.0; 2]; n],
            t: 0,
        }
    }

    fn step(&mut self, grad: &[[f64; 2]], step_size: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (k, g) in grad.iter().enumerate() {
            for c in 0..2 {
                self.m[k][c] = BETA1 * self.m[k][c] + (1.0 - BETA1) * g[c];
                self.v[k][c] = BETA2 * self.v[k][c] + (1.0 - BETA2) * g[c] * g[c];
                let step = (self.m[k][c] / c1) / ((self.v[k][c] / c2).sqrt() + EPSILON);
                self.cp.velocities[k][c] -= step_size * step;
            }
        }
    }
}

/// One level of descent; leaves the level's best iterate in `state.cp`.
fn descend(
    objective: &Objective,
    state: &mut Adam,
    cfg: &RegistrationConfig,
    level: usize,
    trace: &mut Vec<LossRecord>,
) -> Result<()> {
    let mut best = state.cp.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_history = Vec::with_capacity(cfg.max_iterations + 1);

    for iteration in 0..=cfg.max_iterations {
        let want_gradient = iteration < cfg.max_iterations;
        let (terms, grad) = objective.evaluate(&state.cp, want_gradient);
        if !terms.total.is_finite() {
            return Err(Error::Optimization {
                iteration: trace.len(),
                message: format!("loss evaluated to {}", terms.total),
            });
        }
        trace.push(LossRecord::new(trace.len(), level, &terms));
        if terms.total < best_loss {
            best_loss = terms.total;
            best.clone_from(&state.cp);
        }
        best_history.push(best_loss);
        if iteration >= PATIENCE && best_history[iteration - PATIENCE] - best_loss < cfg.convergence_tol {
            break;
        }
        let Some(grad) = grad else { break };
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Optimization {
                iteration: trace.len() - 1,
                message: "non-finite gradient".into(),
            });
        }
        state.step(&grad, cfg.step_size);
    }
    state.cp = best;
    Ok(())
}

/// Registration of every frame of a stack onto its brightest frame.
#[derive(Debug, Clone)]
pub struct StackRegistration {
    pub registered: FrameStack,
    /// One field per frame; the fixed frame's field is zero.
    pub fields: Vec<DisplacementField>,
    /// Loss traces per frame; empty for the fixed frame.
    pub traces: Vec<Vec<LossRecord>>,
    pub fixed_index: usize,
}

/// Registers each frame to the brightest frame independently.
///
/// With `cfg.contrast_surrogate` the moving frame is histogram-matched to the
/// fixed frame for the similarity term only; the final warp always resamples
/// the original intensities. Frames run on the current rayon pool.
pub fn register_stack(stack: &FrameStack, cfg: &RegistrationConfig) -> Result<StackRegistration> {
    cfg.validate()?;
    if !stack.is_normalized() {
        return Err(Error::Precondition("register_stack needs a normalized stack".into()));
    }
    let fixed_index = select_fixed_frame(stack);
    let frames = stack.frames();
    let fixed = &frames[fixed_index];
    let results: Vec<Result<Option<PairResult>>> = (0..frames.len())
        .into_par_iter()
        .map(|i| {
            if i == fixed_index {
                return Ok(None);
            }
            let wrap = |e: Error| Error::Frame {
                frame: i,
                source: Box::new(e),
            };
            let matched;
            let target = if cfg.contrast_surrogate {
                matched = histogram_match(&frames[i], fixed).map_err(wrap)?.frame;
                &matched
            } else {
                &frames[i]
            };
            optimize_registration(fixed, target, cfg).map(Some).map_err(wrap)
        })
        .collect();

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut fields = Vec::with_capacity(frames.len());
    let mut traces = Vec::with_capacity(frames.len());
    for (i, result) in results.into_iter().enumerate() {
        match result? {
            None => {
                out_frames.push(frames[i].clone());
                fields.push(DisplacementField::zeros(stack.width(), stack.height()));
                traces.push(Vec::new());
            }
            Some(pair) => {
                out_frames.push(warp_unchecked(&frames[i], &pair.displacement));
                fields.push(pair.displacement);
                traces.push(pair.trace);
            }
        }
    }
    Ok(StackRegistration {
        registered: FrameStack::with_flag(out_frames, true)?,
        fields,
        traces,
        fixed_index,
    })
}
