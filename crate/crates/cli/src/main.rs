use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surrogate_cli::{run, Command, RunSpec};

/// Point-cloud flow surrogate: data generation, training, evaluation.
#[derive(Parser)]
#[command(name = "surrogate", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train or resume a model.
    Train(Common),
    /// Field errors, force scatter and case ranking for a split.
    Eval(Common),
    /// Per-case drag and lift table.
    Forces(Common),
    /// Chordwise pressure profile of one case.
    Slice(Common),
    /// Forward-pass time against query count.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config overlaid on the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $SURROGATE_OUTPUT_ROOT/<command> or runs/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.total_updates=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective config without running.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, c) = match cli.command {
        Sub::Gen(c) => (Command::Gen, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Forces(c) => (Command::Forces, c),
        Sub::Slice(c) => (Command::Slice, c),
        Sub::Bench(c) => (Command::Bench, c),
    };
    let spec = RunSpec { command, config: c.config, seed: c.seed, out: c.out, overrides: c.overrides, dry_run: c.dry_run };
    match run(&spec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
