//! Experiment orchestration behind the command-line tool.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod run;

pub use commands::{ablate_run, eval_run, gen_data, gradcheck_run, load_run_checkpoint, train_run, AblationCell, AblationRow};
pub use config::{Preset, RunConfig};
pub use run::{evaluate, train, EpochLog, Evaluation};
