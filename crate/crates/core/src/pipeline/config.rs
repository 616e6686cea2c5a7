use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoise::DenoiseConfig;
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::registration::RegistrationConfig;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Crop,
    Normalize,
    Denoise,
    Register,
    Fit,
    Metrics,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Crop => "crop",
            Stage::Normalize => "normalize",
            Stage::Denoise => "denoise",
            Stage::Register => "register",
            Stage::Fit => "fit",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    None,
    /// Integer-pixel translation maximizing hard-binned NMI.
    Rigid,
    #[default]
    Deformable,
}

impl RegistrationMode {
    pub fn name(self) -> &'static str {
        match self {
            RegistrationMode::None => "none",
            RegistrationMode::Rigid => "rigid",
            RegistrationMode::Deformable => "deformable",
        }
    }
}

impl fmt::Display for RegistrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegistrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegistrationMode::None),
            "rigid" => Ok(RegistrationMode::Rigid),
            "deformable" => Ok(RegistrationMode::Deformable),
            other => Err(Error::Config(format!(
                "unknown registration mode {other:?} (expected none, rigid or deformable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidConfig {
    /// Largest shift searched along each axis, px.
    pub max_shift: usize,
}

impl Default for RigidConfig {
    fn default() -> Self {
        RigidConfig { max_shift: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub n_spokes: usize,
    /// Registered frames whose NMI to the fixed frame falls below this are
    /// flagged in the report. Flagged frames are kept; 0 disables flagging.
    pub frame_flag_nmi: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_spokes: 72,
            frame_flag_nmi: 0.0,
        }
    }
}

/// One input: either a synthetic phantom or a stack bundle with its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
}

impl CaseConfig {
    pub fn phantom(id: &str, phantom: PhantomConfig) -> Self {
        CaseConfig {
            id: id.into(),
            stack: None,
            mask: None,
            phantom: Some(phantom),
        }
    }

    pub fn bundle(id: &str, stack: PathBuf, mask: PathBuf) -> Self {
        CaseConfig {
            id: id.into(),
            stack: Some(stack),
            mask: Some(mask),
            phantom: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let safe = |c: char| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.');
        if self.id.is_empty() || !self.id.chars().all(safe) || self.id.starts_with('.') {
            return Err(Error::Config(format!(
                "case id {:?} must be non-empty and use only letters, digits, '-', '_' and '.'",
                self.id
            )));
        }
        match (&self.phantom, &self.stack, &self.mask) {
            (Some(p), None, None) => p.validate(),
            (None, Some(_), Some(_)) => Ok(()),
            (None, Some(_), None) => Err(Error::Config(format!("case {}: a stack input needs a mask", self.id))),
            _ => Err(Error::Config(format!(
                "case {}: give exactly one input, either phantom or stack + mask",
                self.id
            ))),
        }
    }
}

/// Full description of a pipeline run. Serialized back into the report so a
/// run can be repeated from its own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; phantom cases use `seed ^ phantom.seed`.
    pub seed: u64,
    pub crop_size: usize,
    pub out_dir: PathBuf,
    pub mode: RegistrationMode,
    pub denoise_enabled: bool,
    pub denoise: DenoiseConfig,
    pub registration: RegistrationConfig,
    pub rigid: RigidConfig,
    pub metrics: MetricsConfig,
    pub cases: Vec<CaseConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            crop_size: 96,
            out_dir: PathBuf::from("out"),
            mode: RegistrationMode::Deformable,
            denoise_enabled: true,
            denoise: DenoiseConfig::default(),
            registration: RegistrationConfig::default(),
            rigid: RigidConfig::default(),
            metrics: MetricsConfig::default(),
            cases: vec![CaseConfig::phantom("phantom", PhantomConfig::default())],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.metrics.n_spokes == 0 {
            return Err(Error::Config("metrics.n_spokes must be positive".into()));
        }
        if !self.metrics.frame_flag_nmi.is_finite() {
            return Err(Error::Config("metrics.frame_flag_nmi must be finite".into()));
        }
        self.denoise.validate()?;
        self.registration.validate()?;
        let mut seen = BTreeSet::new();
        for case in &self.cases {
            case.validate()?;
            if !seen.insert(case.id.as_str()) {
                return Err(Error::Config(format!("duplicate case id {:?}", case.id)));
            }
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`. A JSON report is
    /// accepted too, in which case its `config` echo is used.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let invalid = |e: serde_json::Error| Error::Config(format!("invalid JSON configuration: {e}"));
            let mut value: serde_json::Value = serde_json::from_str(text).map_err(invalid)?;
            if value.get("version").is_some() {
                if let Some(echo) = value.get_mut("config") {
                    value = echo.take();
                }
            }
            serde_json::from_value(value).map_err(invalid)
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML configuration: {e}")))
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}
