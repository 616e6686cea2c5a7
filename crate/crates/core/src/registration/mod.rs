//! Deformable registration with a B-spline stationary velocity field and a
//! Parzen-windowed NMI objective.

mod bspline;
mod contrast;
mod histogram;
mod loss;
mod optimize;
mod rigid;
mod svf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bspline::{bspline_basis, cubic_kernel, cubic_kernel_derivative, grid_size, interpolate_velocity};
pub use contrast::{histogram_match, MatchOutcome};
pub use histogram::{entropies, joint_histogram_parzen, nmi, JointHistogram, NMI_CEILING};
pub use loss::{bending_energy, bending_energy_gradient, loss_gradient, registration_loss, LossTerms};
pub use optimize::{optimize_registration, register_stack, LossRecord, PairResult, StackRegistration};
pub use rigid::{register_rigid, shift_frame};
pub use svf::{integrate_svf, jacobian_determinant, warp_image};

/// Velocities on a regular control lattice, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointField {
    pub spacing: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub velocities: Vec<[f64; 2]>,
}

impl ControlPointField {
    /// Zero field sized to cover an `image_width × image_height` image.
    pub fn zeros(image_width: usize, image_height: usize, spacing: usize) -> Self {
        let spacing = spacing.max(1);
        let grid_width = grid_size(image_width, spacing);
        let grid_height = grid_size(image_height, spacing);
        ControlPointField {
            spacing,
            grid_width,
            grid_height,
            velocities: vec![[0.0; 2]; grid_width * grid_height],
        }
    }

    pub fn get(&self, gx: usize, gy: usize) -> [f64; 2] {
        self.velocities[gy * self.grid_width + gx]
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.velocities.len() != self.grid_width * self.grid_height {
            return Err(Error::Dimension(format!(
                "{} velocities for a {}x{} grid",
                self.velocities.len(),
                self.grid_width,
                self.grid_height
            )));
        }
        if self.velocities.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("control velocities must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub lambda_reg: f64,
    pub spacing: usize,
    pub bins: usize,
    /// Kernel width in bins; 0 selects hard binning.
    pub parzen_width: f64,
    pub integration_steps: u32,
    pub max_iterations: usize,
    /// Largest per-parameter update in pixels.
    pub step_size: f64,
    pub convergence_tol: f64,
    pub seed: u64,
    /// Match moving intensities to the fixed frame before computing NMI.
    pub contrast_surrogate: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            lambda_reg: 0.1,
            spacing: 4,
            bins: 32,
            parzen_width: 1.0,
            integration_steps: 6,
            max_iterations: 150,
            step_size: 0.1,
            convergence_tol: 1e-5,
            seed: 0,
            contrast_surrogate: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if self.spacing < 1 {
            return Err(Error::Config("spacing must be >= 1".into()));
        }
        if self.bins < 8 {
            return Err(Error::Config(format!("bins must be >= 8, got {}", self.bins)));
        }
        if !(self.parzen_width >= 0.0 && self.parzen_width.is_finite()) {
            return Err(Error::Config(format!("parzen_width must be >= 0, got {}", self.parzen_width)));
        }
        if self.integration_steps > 20 {
            return Err(Error::Config(format!(
                "integration_steps {} is beyond any useful precision",
                self.integration_steps
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.convergence_tol >= 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::Config(format!("convergence_tol must be >= 0, got {}", self.convergence_tol)));
        }
        histogram::BinMap::new(self.bins, self.parzen_width)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_image() {
        let cp = ControlPointField::zeros(96, 96, 4);
        assert_eq!((cp.grid_width, cp.grid_height), (27, 27));
        let cp = ControlPointField::zeros(16, 16, 4);
        assert_eq!((cp.grid_width, cp.grid_height), (7, 7));
        let cp = ControlPointField::zeros(17, 10, 4);
        assert_eq!((cp.grid_width, cp.grid_height), (8, 6));
        assert!(cp.validate().is_ok());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RegistrationConfig::default();
        assert_eq!(cfg.lambda_reg, 0.1);
        assert_eq!(cfg.spacing, 4);
        assert_eq!(cfg.bins, 32);
        assert_eq!(cfg.integration_steps, 6);
        assert!(cfg.validate().is_ok());
        for bad in [
            RegistrationConfig { lambda_reg: -0.1, ..cfg.clone() },
            RegistrationConfig { spacing: 0, ..cfg.clone() },
            RegistrationConfig { bins: 7, ..cfg.clone() },
            RegistrationConfig { parzen_width: -1.0, ..cfg.clone() },
            RegistrationConfig { step_size: 0.0, ..cfg.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: RegistrationConfig = toml::from_str("lambda_reg = 0.5\nbins = 16").unwrap();
        assert_eq!((parsed.lambda_reg, parsed.bins, parsed.spacing), (0.5, 16, 4));
        assert!(toml::from_str::<RegistrationConfig>("lamda = 1.0").is_err());
    }
}
