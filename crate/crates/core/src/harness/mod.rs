//! Experiment driver: TOML configs, named experiments and their reports.

mod config;
mod report;
mod run;

pub use config::{
    EvalSpec, Experiment, ExperimentConfig, GammaSource, ModelSpec, Preset, TrainOverrides, CONFIG_FORMAT_VERSION,
};
pub use report::{emit_report, EvalReport, Metric, ReportFormat, ReportRow};
pub use run::{
    build_model, run_bootstrap_demo, run_cid_probe, run_experiment, run_gammastar, run_lengthgen, run_posteriorgap,
    train_ext, write_report_files,
};
