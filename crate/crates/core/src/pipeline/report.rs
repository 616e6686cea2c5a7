use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::bundle::write_atomic;
use crate::pipeline::{PipelineConfig, Stage};
use crate::tensor::{HagSummary, NegativeCounts};

pub const CSV_HEADER: &str = "case_id,n_neg1,n_neg2,n_neg3,n_profiles,r2_mean,r2_sd,rmse_mean,rmse_sd";

/// One row of the metric table. `n_profiles` counts included profiles; the
/// statistics are `None` when no profile is included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub case_id: String,
    pub n_neg1: usize,
    pub n_neg2: usize,
    pub n_neg3: usize,
    pub n_profiles: usize,
    pub r2_mean: Option<f64>,
    pub r2_sd: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_sd: Option<f64>,
}

impl MetricRow {
    pub fn new(case_id: &str, neg: NegativeCounts, hag: &HagSummary) -> Self {
        MetricRow {
            case_id: case_id.into(),
            n_neg1: neg.one,
            n_neg2: neg.two,
            n_neg3: neg.three,
            n_profiles: hag.n_included,
            r2_mean: hag.r2_mean,
            r2_sd: hag.r2_sd,
            rmse_mean: hag.rmse_mean,
            rmse_sd: hag.rmse_sd,
        }
    }

    pub fn negative_total(&self) -> usize {
        self.n_neg1 + self.n_neg2 + self.n_neg3
    }

    /// Floats use Rust's shortest round-trip formatting; missing values are empty.
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.case_id,
            self.n_neg1,
            self.n_neg2,
            self.n_neg3,
            self.n_profiles,
            opt(self.r2_mean),
            opt(self.r2_sd),
            opt(self.rmse_mean),
            opt(self.rmse_sd)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// Everything the pipeline learned about one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case_id: String,
    pub row: MetricRow,
    pub timings: Vec<StageTiming>,
    pub n_frames: usize,
    pub fixed_index: usize,
    /// Components kept by the denoiser, when it ran.
    pub denoise_kept: Option<usize>,
    /// NMI of each frame to the fixed frame after registration.
    pub frame_nmi: Vec<f64>,
    pub flagged_frames: Vec<usize>,
    /// Smallest Jacobian determinant over all registration fields, when registration ran.
    pub min_jacobian: Option<f64>,
    pub n_profiles_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub version: String,
    pub config: PipelineConfig,
    /// Sorted by case id.
    pub cases: Vec<CaseReport>,
}

impl Report {
    pub fn new(config: PipelineConfig, mut cases: Vec<CaseReport>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Report {
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            cases,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for case in &self.cases {
            let _ = writeln!(out, "{}", case.row.csv_line());
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes to JSON");
        s.push('\n');
        s
    }
}

/// Writes `report.csv`, `report.json` and `config.toml` (the config echo) into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("config.toml"), report.config.to_toml().as_bytes())
}
