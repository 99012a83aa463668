//! Command-line workflows: phantom generation, prevalence map building, training, prediction
//! and evaluation. Exit status is 0 on success, 1 on a workflow error and 2 on a usage error.

pub mod args;
pub mod overlay;
pub mod record;
pub mod workflows;

use std::ffi::OsString;

use clap::Parser;

use crate::args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_WORKFLOW: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenPhantoms(a) => workflows::gen_phantoms(a),
        Command::BuildPrevmap(a) => workflows::build_prevmap(a),
        Command::TrainDetect(a) => workflows::train_detect(a),
        Command::TrainSegment(a) => workflows::train_segment(a),
        Command::Predict(a) => workflows::predict(a),
        Command::Evaluate(a) => workflows::evaluate(a),
    }
}

/// Human-readable error, prefixed by the failing pipeline stage when there is one.
pub fn describe(err: &anyhow::Error) -> String {
    let stage = err
        .chain()
        .find_map(|e| e.downcast_ref::<lacune::Error>().and_then(lacune::Error::stage));
    match stage {
        Some(s) => format!("error in stage `{s}`: {err:#}"),
        None => format!("error: {err:#}"),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", describe(&e));
            EXIT_WORKFLOW
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(dispatch(["lacune", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["lacune", "evaluate", "--bogus"]), EXIT_USAGE);
        assert_eq!(dispatch(["lacune"]), EXIT_USAGE);
        assert_eq!(dispatch(["lacune", "--help"]), EXIT_OK);
    }

    #[test]
    fn stage_named_in_message() {
        let inner = lacune::Error::Stage {
            stage: "detect",
            source: Box::new(lacune::Error::Empty("x".into())),
        };
        let msg = describe(&anyhow::Error::new(inner).context("case c1"));
        assert!(msg.starts_with("error in stage `detect`"), "{msg}");
    }
}
