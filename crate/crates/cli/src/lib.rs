//! Library surface of the experiment runner, kept separate from the binary
//! so the acceptance suite can drive sweeps in-process.

pub mod config;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig, ModelName, OUTPUT_DIR_ENV};
pub use experiment::{
    export_instanton, run_experiment, validate_against_oracle, ExperimentArtifacts, RunError,
    ValidationReport, ValidationRow,
};
