//! Experiment plumbing: typed configs, verification suites, and the
//! train / eval / export drivers behind the command-line tool.

pub mod config;
pub mod gradsuite;
pub mod run;
pub mod theory;

pub use config::{apply_override, write_atomic, ExperimentConfig, RunManifest, RunStatus, SeedRecord, OUTPUT_ENV};
pub use gradsuite::{grad_suite, GradCase, GradSuiteReport, GRAD_THRESHOLD};
pub use theory::{
    bound_suite, contraction_suite, BoundSettings, BoundSuiteReport, ContractionReport, ContractionSettings,
};
