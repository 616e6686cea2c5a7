//! Synthetic annular myocardium with known tensors, helix angles and motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{select_fixed_frame, DiffusionMeta, DisplacementField, Frame, FrameStack, Mask};
use crate::registration::{integrate_svf, interpolate_velocity, warp_image, ControlPointField};
use crate::tensor::{DiffusionTensor, TensorMap};

/// Nine unit encoding directions spread by antipodal electrostatic repulsion.
pub const DEFAULT_DIRECTIONS: [[f64; 3]; 9] = [
    [0.0, 0.0, 1.0],
    [-0.911107, 0.0, 0.412171],
    [-0.744863, -0.666527, 0.030357],
    [-0.264469, -0.631016, 0.729297],
    [0.839383, 0.046414, 0.541555],
    [0.047051, -0.998431, 0.030357],
    [-0.555461, 0.631016, 0.541555],
    [0.638844, -0.649610, 0.412171],
    [0.279352, 0.666527, 0.691162],
];

/// Control spacing of the random motion velocity field, in pixels.
const MOTION_SPACING: usize = 16;
const MOTION_STEPS: u32 = 6;
const MOTION_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    /// Rigid translation only.
    Translation,
    /// Translation composed with a smooth diffeomorphic deformation.
    #[default]
    Deformable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub r_endo: f64,
    pub r_epi: f64,
    /// Helix angle in degrees at the endocardium and the epicardium.
    pub ha_endo: f64,
    pub ha_epi: f64,
    /// Principal diffusivities in mm²/s, descending.
    pub eigenvalues: [f64; 3],
    pub s0: f64,
    /// Low and high b-values in s/mm².
    pub b_values: [f64; 2],
    pub directions: Vec<[f64; 3]>,
    pub n_avg_b150: u32,
    pub n_avg_b600: u32,
    pub noise_sigma: f64,
    /// Translation bound per axis and peak velocity of the deformation, px.
    pub motion_amplitude: f64,
    pub motion_mode: MotionMode,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 96,
            r_endo: 16.0,
            r_epi: 28.0,
            ha_endo: 60.0,
            ha_epi: -60.0,
            eigenvalues: [1.5e-3, 0.8e-3, 0.4e-3],
            s0: 1.0,
            b_values: [150.0, 600.0],
            directions: DEFAULT_DIRECTIONS.to_vec(),
            n_avg_b150: 2,
            n_avg_b600: 7,
            noise_sigma: 0.0,
            motion_amplitude: 0.0,
            motion_mode: MotionMode::Deformable,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let half = self.size as f64 / 2.0;
        if !(0.0 < self.r_endo && self.r_endo < self.r_epi && self.r_epi < half) {
            return Err(Error::Config(format!(
                "radii must satisfy 0 < r_endo < r_epi < size/2, got {} and {} for size {}",
                self.r_endo, self.r_epi, self.size
            )));
        }
        let l = self.eigenvalues;
        if !(l[2] > 0.0 && l[1] >= l[2] && l[0] >= l[1]) || l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("eigenvalues must be positive and descending, got {l:?}")));
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::Config(format!("s0 must be positive, got {}", self.s0)));
        }
        if self.b_values.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("b-values must be positive, got {:?}", self.b_values)));
        }
        if self.directions.len() < 6 {
            return Err(Error::Config(format!("{} directions cannot span a tensor", self.directions.len())));
        }
        if self.n_avg_b150 + self.n_avg_b600 == 0 {
            return Err(Error::Config("at least one weighted average is required".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude.is_finite()) {
            return Err(Error::Config(format!("motion_amplitude must be >= 0, got {}", self.motion_amplitude)));
        }
        Ok(())
    }

    pub fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    /// Acquisition order: one b = 0 frame, then each direction's averages at
    /// the low b-value, then at the high b-value.
    pub fn acquisition(&self) -> Result<Vec<DiffusionMeta>> {
        let mut metas = vec![DiffusionMeta::reference()];
        for (b, avgs) in [(self.b_values[0], self.n_avg_b150), (self.b_values[1], self.n_avg_b600)] {
            for d in &self.directions {
                for a in 0..avgs {
                    metas.push(DiffusionMeta::weighted(b, *d, a)?);
                }
            }
        }
        Ok(metas)
    }
}

/// Ground truth of a generated phantom.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    /// Noise- and motion-free stack in acquisition order.
    pub clean: FrameStack,
    pub tensors: TensorMap,
    /// Analytic helix angle in degrees on the mask, `None` elsewhere.
    pub helix_angle: Vec<Option<f64>>,
    /// Analytic transmural depth on the mask, `None` elsewhere.
    pub depth: Vec<Option<f64>>,
    pub mask: Mask,
    /// Forward motion per frame: moved(x) = clean(x + field(x)). Zero for the clean stack.
    pub fields: Vec<DisplacementField>,
}

/// Builds the annulus, its fiber architecture and the noiseless signals.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomTruth> {
    cfg.validate()?;
    let n = cfg.size;
    let c = cfg.center();
    let metas = cfg.acquisition()?;
    let mut inside = vec![false; n * n];
    let mut tensors = vec![DiffusionTensor::default(); n * n];
    let mut helix_angle = vec![None; n * n];
    let mut depth = vec![None; n * n];
    for i in 0..n * n {
        let (dx, dy) = ((i % n) as f64 - c, (i / n) as f64 - c);
        let r = dx.hypot(dy);
        if r < cfg.r_endo || r > cfg.r_epi {
            continue;
        }
        inside[i] = true;
        let d = (r - cfg.r_endo) / (cfg.r_epi - cfg.r_endo);
        let ha = cfg.ha_endo + (cfg.ha_epi - cfg.ha_endo) * d;
        let theta = dy.atan2(dx);
        let radial = [theta.cos(), theta.sin(), 0.0];
        let circ = [-theta.sin(), theta.cos(), 0.0];
        let (s, co) = ha.to_radians().sin_cos();
        let fiber = [co * circ[0], co * circ[1], s];
        let normal = [-s * circ[0], -s * circ[1], co];
        let axes = [fiber, radial, normal];
        let mut m = [[0.0; 3]; 3];
        for (lambda, v) in cfg.eigenvalues.iter().zip(axes) {
            for (a, row) in m.iter_mut().enumerate() {
                for (b, entry) in row.iter_mut().enumerate() {
                    *entry += lambda * v[a] * v[b];
                }
            }
        }
        tensors[i] = DiffusionTensor {
            dxx: m[0][0],
            dyy: m[1][1],
            dzz: m[2][2],
            dxy: m[0][1],
            dxz: m[0][2],
            dyz: m[1][2],
            s0: cfg.s0,
        };
        helix_angle[i] = Some(ha);
        depth[i] = Some(d);
    }
    let frames = metas
        .iter()
        .map(|meta| {
            let g = meta.direction;
            let data = (0..n * n)
                .map(|i| {
                    if !inside[i] {
                        return 0.0;
                    }
                    let t = &tensors[i];
                    let q = t.dxx * g[0] * g[0]
                        + t.dyy * g[1] * g[1]
                        + t.dzz * g[2] * g[2]
                        + 2.0 * (t.dxy * g[0] * g[1] + t.dxz * g[0] * g[2] + t.dyz * g[1] * g[2]);
                    cfg.s0 * (-meta.b_value * q).exp()
                })
                .collect();
            Frame::new(n, n, data, *meta)
        })
        .collect::<Result<Vec<_>>>()?;
    let count = frames.len();
    Ok(PhantomTruth {
        clean: FrameStack::new(frames)?,
        tensors: TensorMap {
            width: n,
            height: n,
            tensors,
            valid: inside.clone(),
        },
        helix_angle,
        depth,
        mask: Mask::new(n, n, inside)?,
        fields: vec![DisplacementField::zeros(n, n); count],
    })
}

fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frame as u64);
    rng.set_stream(stream);
    rng
}

/// Moved stack with its motion ground truth.
#[derive(Debug, Clone)]
pub struct MotionOutcome {
    pub stack: FrameStack,
    /// Forward fields: moved(x) = clean(x + forward(x)).
    pub forward: Vec<DisplacementField>,
    /// Fields that map each moved frame back onto the fixed frame under the
    /// pull-back warp; this is what registration should recover.
    pub inverse: Vec<DisplacementField>,
    pub fixed_index: usize,
}

/// Moves every frame except the brightest by a seeded translation, optionally
/// composed with a smooth deformation from a random B-spline velocity field.
pub fn apply_synthetic_motion(truth: &PhantomTruth, cfg: &PhantomConfig) -> Result<MotionOutcome> {
    cfg.validate()?;
    let stack = &truth.clean;
    let (w, h) = (stack.width(), stack.height());
    let fixed_index = select_fixed_frame(stack);
    let a = cfg.motion_amplitude;
    let zero = DisplacementField::zeros(w, h);
    let mut frames = Vec::with_capacity(stack.len());
    let mut forward = Vec::with_capacity(stack.len());
    let mut inverse = Vec::with_capacity(stack.len());
    for (k, frame) in stack.frames().iter().enumerate() {
        if k == fixed_index || a == 0.0 {
            frames.push(frame.clone());
            forward.push(zero.clone());
            inverse.push(zero.clone());
            continue;
        }
        let mut rng = frame_rng(cfg.seed, k, MOTION_STREAM);
        let t = [rng.random_range(-a..=a), rng.random_range(-a..=a)];
        let (fwd, inv) = match cfg.motion_mode {
            MotionMode::Translation => (DisplacementField::constant(w, h, t), DisplacementField::constant(w, h, [-t[0], -t[1]])),
            MotionMode::Deformable => {
                let mut cp = ControlPointField::zeros(w, h, MOTION_SPACING);
                for v in cp.velocities.iter_mut() {
                    *v = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                }
                let velocity = interpolate_velocity(&cp, w, h)?;
                let peak = velocity.max_norm();
                let velocity = if peak > 0.0 { velocity.scaled(a / peak) } else { velocity };
                let u = integrate_svf(&velocity, MOTION_STEPS)?;
                let u_inv = integrate_svf(&velocity.scaled(-1.0), MOTION_STEPS)?;
                let (ix, iy) = u_inv.components();
                let mut inv = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = (x as f64 - t[0], y as f64 - t[1]);
                        inv.push([
                            -t[0] + crate::imaging::bilinear_sample_clamped(&ix, w, h, sx, sy),
                            -t[1] + crate::imaging::bilinear_sample_clamped(&iy, w, h, sx, sy),
                        ]);
                    }
                }
                let fwd = DisplacementField::new(w, h, u.vectors.iter().map(|d| [d[0] + t[0], d[1] + t[1]]).collect())?;
                (fwd, DisplacementField::new(w, h, inv)?)
            }
        };
        frames.push(warp_image(frame, &fwd)?);
        forward.push(fwd);
        inverse.push(inv);
    }
    Ok(MotionOutcome {
        stack: FrameStack::new(frames)?,
        forward,
        inverse,
        fixed_index,
    })
}

/// Magnitude noise: `sqrt((v + n1)² + n2²)` with independent `N(0, sigma)` draws.
pub fn add_rician_noise(stack: &FrameStack, sigma: f64, seed: u64) -> Result<FrameStack> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(stack.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
    let frames = stack
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut rng = frame_rng(seed, k, NOISE_STREAM);
            Frame {
                data: f
                    .data
                    .iter()
                    .map(|v| {
                        let n1: f64 = normal.sample(&mut rng);
                        let n2: f64 = normal.sample(&mut rng);
                        (v + n1).hypot(n2)
                    })
                    .collect(),
                ..f.clone()
            }
        })
        .collect();
    FrameStack::new(frames)
}

/// A full synthetic acquisition: truth, moved and noisy stack, motion truth.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub truth: PhantomTruth,
    pub stack: FrameStack,
    pub motion: MotionOutcome,
}

/// generate → move → add noise, all seeded by `cfg.seed`.
pub fn simulate(cfg: &PhantomConfig) -> Result<Acquisition> {
    let truth = generate_phantom(cfg)?;
    let motion = apply_synthetic_motion(&truth, cfg)?;
    let stack = add_rician_noise(&motion.stack, cfg.noise_sigma, cfg.seed)?;
    Ok(Acquisition { truth, stack, motion })
}

/// Mean and maximum per-pixel Euclidean difference over the mask.
pub fn endpoint_error(estimated: &DisplacementField, truth: &DisplacementField, mask: &Mask) -> Result<(f64, f64)> {
    truth.check_matches(estimated.width, estimated.height)?;
    mask.check_matches(estimated.width, estimated.height)?;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0usize;
    for i in 0..mask.inside.len() {
        if !mask.inside[i] {
            continue;
        }
        let (e, t) = (estimated.vectors[i], truth.vectors[i]);
        let d = (e[0] - t[0]).hypot(e[1] - t[1]);
        sum += d;
        max = max.max(d);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("endpoint error over an empty mask".into()));
    }
    Ok((sum / count as f64, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{eigen_decompose, fit_tensor, helix_angle_map, wall_coordinates};

    fn small() -> PhantomConfig {
        PhantomConfig {
            size: 48,
            r_endo: 8.0,
            r_epi: 16.0,
            n_avg_b600: 2,
            n_avg_b150: 1,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn default_design_has_82_frames() {
        let metas = PhantomConfig::default().acquisition().unwrap();
        assert_eq!(metas.len(), 1 + 9 * 2 + 9 * 7);
        assert_eq!(metas[0].b_value, 0.0);
        for d in DEFAULT_DIRECTIONS {
            assert!((d.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn validation() {
        for bad in [
            PhantomConfig { r_endo: 30.0, ..PhantomConfig::default() },
            PhantomConfig { r_epi: 48.0, ..PhantomConfig::default() },
            PhantomConfig { eigenvalues: [0.4e-3, 0.8e-3, 1.5e-3], ..PhantomConfig::default() },
            PhantomConfig { noise_sigma: -1.0, ..PhantomConfig::default() },
            PhantomConfig { directions: DEFAULT_DIRECTIONS[..5].to_vec(), ..PhantomConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: PhantomConfig = toml::from_str("size = 64\nmotion_mode = \"translation\"").unwrap();
        assert_eq!((parsed.size, parsed.motion_mode), (64, MotionMode::Translation));
    }

    #[test]
    fn signal_examples() {
        let truth = generate_phantom(&small()).unwrap();
        let b0 = &truth.clean.frames()[0];
        for i in 0..b0.data.len() {
            assert_eq!(b0.data[i], if truth.mask.inside[i] { 1.0 } else { 0.0 });
        }
        let iso = PhantomConfig { eigenvalues: [1e-3; 3], ..small() };
        let truth = generate_phantom(&iso).unwrap();
        for f in truth.clean.frames().iter().filter(|f| f.meta.b_value == 600.0) {
            for i in 0..f.data.len() {
                if truth.mask.inside[i] {
                    assert!((f.data[i] - (-0.6f64).exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_closure() {
        let cfg = small();
        let truth = generate_phantom(&cfg).unwrap();
        let map = fit_tensor(&truth.clean, &truth.mask).unwrap();
        let wc = wall_coordinates(&truth.mask).unwrap();
        let ha = helix_angle_map(&map, &wc, &truth.mask).unwrap();
        let mut depth_err = 0.0;
        for i in 0..map.tensors.len() {
            if !truth.mask.inside[i] {
                continue;
            }
            assert!(map.valid[i]);
            let l = eigen_decompose(&map.tensors[i]).eigenvalues;
            for (a, b) in l.iter().zip(cfg.eigenvalues) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!((ha.values[i].unwrap() - truth.helix_angle[i].unwrap()).abs() < 1e-6);
            depth_err += (wc.depth[i] - truth.depth[i].unwrap()).abs();
        }
        assert!(depth_err / (truth.mask.count() as f64) < 0.05);
    }

    #[test]
    fn fiber_elevation_example() {
        // the analytic HA hits 37° at depth (60 − 37) / 120
        let cfg = small();
        let truth = generate_phantom(&cfg).unwrap();
        let map = fit_tensor(&truth.clean, &truth.mask).unwrap();
        let wc = wall_coordinates(&truth.mask).unwrap();
        let ha = helix_angle_map(&map, &wc, &truth.mask).unwrap();
        let target = (60.0 - 37.0) / 120.0;
        let i = (0..truth.depth.len())
            .filter(|i| truth.depth[*i].is_some())
            .min_by(|a, b| (truth.depth[*a].unwrap() - target).abs().total_cmp(&(truth.depth[*b].unwrap() - target).abs()))
            .unwrap();
        let expect = 60.0 - 120.0 * truth.depth[i].unwrap();
        assert!((expect - 37.0).abs() < 3.0);
        assert!((ha.values[i].unwrap() - expect).abs() < 0.5);
    }

    #[test]
    fn motion_zero_and_translation() {
        let cfg = small();
        let truth = generate_phantom(&cfg).unwrap();
        let still = apply_synthetic_motion(&truth, &cfg).unwrap();
        assert_eq!(still.stack.frames(), truth.clean.frames());
        assert!(still.forward.iter().all(|f| f.max_norm() == 0.0));

        let moving = PhantomConfig { motion_amplitude: 2.0, motion_mode: MotionMode::Translation, ..cfg };
        let out = apply_synthetic_motion(&truth, &moving).unwrap();
        assert_eq!(out.fixed_index, 0);
        for (k, f) in out.forward.iter().enumerate() {
            let first = f.vectors[0];
            assert!(f.vectors.iter().all(|v| *v == first));
            assert!(first[0].abs() <= 2.0 && first[1].abs() <= 2.0);
            if k != 0 {
                assert!(first != [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn deformable_motion_is_deterministic_and_consistent() {
        let cfg = PhantomConfig { motion_amplitude: 2.0, ..small() };
        let truth = generate_phantom(&cfg).unwrap();
        let a = apply_synthetic_motion(&truth, &cfg).unwrap();
        let b = apply_synthetic_motion(&truth, &cfg).unwrap();
        assert_eq!(a.stack.frames(), b.stack.frames());
        assert_eq!(a.forward, b.forward);
        let n = cfg.size;
        let smooth: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - 23.5, (i / n) as f64 - 23.5);
                0.2 + 0.6 * (-(x * x + y * y) / 120.0).exp() + 0.1 * (x / 5.0).sin()
            })
            .collect();
        let fixed = &Frame::new(n, n, smooth, DiffusionMeta::reference()).unwrap();
        for k in 1..a.stack.len() {
            // warping the clean frame by the recorded field reproduces the moved frame
            let warped = warp_image(&truth.clean.frames()[k], &a.forward[k]).unwrap();
            assert_eq!(warped, a.stack.frames()[k]);
            // the inverse field undoes the motion up to interpolation error
            let back = warp_image(&warp_image(fixed, &a.forward[k]).unwrap(), &a.inverse[k]).unwrap();
            let mae = back.data.iter().zip(&fixed.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / fixed.data.len() as f64;
            assert!(mae < 0.01 * cfg.s0, "frame {k}: {mae}");
        }
    }

    #[test]
    fn rician_noise() {
        let cfg = small();
        let truth = generate_phantom(&cfg).unwrap();
        assert_eq!(add_rician_noise(&truth.clean, 0.0, 1).unwrap().frames(), truth.clean.frames());
        let zeros = FrameStack::new(vec![Frame::zeros(100, 50, DiffusionMeta::reference()); 2]).unwrap();
        let noisy = add_rician_noise(&zeros, 0.05, 7).unwrap();
        let data: Vec<f64> = noisy.frames().iter().flat_map(|f| f.data.iter().copied()).collect();
        assert!(data.iter().all(|v| *v >= 0.0));
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // Rayleigh mean sigma·sqrt(π/2)
        let expect = 0.05 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - expect).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {expect}");
        assert_eq!(add_rician_noise(&zeros, 0.05, 7).unwrap().frames(), noisy.frames());
        assert!(add_rician_noise(&zeros, -0.1, 7).is_err());
    }

    #[test]
    fn endpoint_error_examples() {
        let mask = Mask::full(5, 4);
        let truth = DisplacementField::constant(5, 4, [1.0, -2.0]);
        assert_eq!(endpoint_error(&truth, &truth, &mask).unwrap(), (0.0, 0.0));
        let off = DisplacementField::constant(5, 4, [1.3, -1.6]);
        let (mean, max) = endpoint_error(&off, &truth, &mask).unwrap();
        assert!((mean - 0.5).abs() < 1e-12 && (max - 0.5).abs() < 1e-12);
        let two = DisplacementField::constant(5, 4, [2.0, 0.0]);
        assert_eq!(endpoint_error(&DisplacementField::zeros(5, 4), &two, &mask).unwrap().0, 2.0);
        assert!(endpoint_error(&DisplacementField::zeros(4, 4), &two, &mask).is_err());
    }
}
