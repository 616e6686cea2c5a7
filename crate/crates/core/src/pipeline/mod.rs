//! End-to-end processing: crop → normalize → denoise → register → fit →
//! metrics, per case, with an aggregate CSV/JSON report.
//!
//! Each case writes its artifacts to `<out_dir>/<case id>/` as stages finish,
//! so a failure keeps everything produced before the failing stage.

mod config;
mod report;
mod run;

pub use config::{CaseConfig, MetricsConfig, PipelineConfig, RegistrationMode, RigidConfig, Stage};
pub use report::{emit_report, CaseReport, MetricRow, Report, StageTiming, CSV_HEADER};
pub use run::{
    invariant_maps, loss_trace_csv, metrics_with_outputs, profiles_csv, register_rigid_stack, run_case, run_pipeline,
    write_fit_outputs,
};
