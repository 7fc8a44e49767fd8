//! Experiment harness around `promptseg-core`.

pub mod ablate;
pub mod alloc;
pub mod args;
pub mod commands;
pub mod record;
pub mod report;
pub mod svg;

pub use ablate::{cmd_ablate, AblationOutcome};
pub use args::{Cli, Command};
pub use commands::{cmd_eval, cmd_synth, cmd_train};
pub use record::ExperimentRecord;
pub use report::cmd_report;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    alloc::keep_freed_memory();
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Ablate(a) => cmd_ablate(&a).map(drop),
        Command::Report(a) => cmd_report(&a).map(drop),
    }
}
