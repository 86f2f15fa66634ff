//! Command implementations behind the `flux` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_bench, cmd_eval, cmd_gradcheck, cmd_pretrain, cmd_profile, cmd_train_router, Context, EvalSpec};
pub use config::RunConfig;
pub use error::CliError;
