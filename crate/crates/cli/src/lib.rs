//! Library side of the `vlpl` command-line tool.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_pseudolabel, cmd_simulate, cmd_sweep, cmd_synth, cmd_train, SynthOptions};
pub use config::{ConfigError, ExperimentConfig};

/// Exit status for an error: 2 for usage or configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<ConfigError>().is_some()) {
        2
    } else {
        1
    }
}
