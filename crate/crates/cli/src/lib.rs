//! Training, adaptation, enhancement and experiment commands behind the
//! `vaenmf` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use commands::{
    cmd_enhance, cmd_evaluate, cmd_finetune, cmd_mix, cmd_personalize, cmd_train, EnhanceDiagnostics, TrainOutcome,
};
pub use config::{ExperimentConfig, InitMode, Overrides, PlanKind};
pub use error::{CliError, Result};
pub use experiment::{cmd_experiment, ExperimentOutcome};
