//! Command-line front end: synthetic data, k-fold training, evaluation,
//! ablation sweeps, parameter audits and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{
    cmd_ablate, cmd_audit, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, load_dataset, sweep_settings,
    train_folds, AblationReport, AuditOutput, EvalData, EvalReport, FoldOutcome, Sweep, TrainReport,
};
pub use config::{load_config, parse_config, RunConfig};
pub use error::{CliError, CliResult};
