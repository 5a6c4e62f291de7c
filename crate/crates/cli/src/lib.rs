//! Command implementations behind the `mrcae` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_evaluate, cmd_gradcheck, cmd_separate, cmd_synth, cmd_train, exit_code, Precision};
pub use config::RunConfig;
