//! Command implementations behind the `surrogate` binary.

pub mod commands;
pub mod config;
mod svg;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use surrogate_core::Error;

pub use commands::{cmd_bench, cmd_eval, cmd_forces, cmd_gen, cmd_slice, cmd_train, BenchRow};

/// Default parent of per-command output directories.
pub const OUTPUT_ROOT_ENV: &str = "SURROGATE_OUTPUT_ROOT";
pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
                Error::Corrupt(_) | Error::NotFound(_) | Error::Io(_) | Error::Json(_) | Error::EmptySlice(_) => 3,
                Error::NonFinite { .. } | Error::UndefinedRatio(_) => 4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    Forces,
    Slice,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Forces => "forces",
            Command::Slice => "slice",
            Command::Bench => "bench",
        }
    }

    /// Dotted keys set by `--seed`.
    fn seed_keys(self) -> &'static [&'static str] {
        match self {
            Command::Gen => &["gen.seed"],
            Command::Train => &["train.seed", "model.init_seed"],
            _ => &["seed"],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Print the effective config and stop.
    pub dry_run: bool,
}

impl RunSpec {
    pub fn output_dir(&self) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(self.command.name()),
        }
    }

    fn all_overrides(&self) -> Vec<String> {
        let mut o: Vec<String> = match self.seed {
            Some(s) => self.command.seed_keys().iter().map(|k| format!("{k}={s}")).collect(),
            None => Vec::new(),
        };
        o.extend(self.overrides.iter().cloned());
        o
    }
}

/// Resolves the config, snapshots it into the output directory, then runs.
pub fn run(spec: &RunSpec) -> Result<(), CliError> {
    let out = spec.output_dir();
    match spec.command {
        Command::Gen => with_config(spec, &out, |c| {
            for p in cmd_gen(&c, &out)? {
                say(format_args!("wrote {}", p.display()));
            }
            Ok(())
        }),
        Command::Train => with_config(spec, &out, |c| {
            let r = cmd_train(&c, &out)?;
            let loss = r.final_loss.map_or("n/a".to_string(), |l| format!("{l:.5}"));
            say(format_args!("step {}; last loss {loss}; checkpoint {}", r.step, r.checkpoint.display()));
            Ok(())
        }),
        Command::Eval => with_config(spec, &out, |c| {
            let s = cmd_eval(&c, &out)?;
            let r2 = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            say(format_args!("drag R² {}, lift R² {}", r2(s.report.r2_drag), r2(s.report.r2_lift)));
            for (name, e) in &s.report.fields {
                say(format_args!("{name}: mae {:.4e}, rel L1 {:.4}, rel L2 {:.4}", e.mae, e.rel_l1, e.rel_l2));
            }
            let k = s.ranking;
            say(format_args!("best case {}, median {}, worst {}", k.best, k.median, k.worst));
            Ok(())
        }),
        Command::Forces => with_config(spec, &out, |c| {
            let rows = cmd_forces(&c, &out)?;
            say(format_args!("{} cases written to {}", rows.len(), out.join(commands::FORCES_CSV).display()));
            Ok(())
        }),
        Command::Slice => with_config(spec, &out, |c| {
            let rows = cmd_slice(&c, &out)?;
            say(format_args!("{} slice points written to {}", rows.len(), out.join(commands::PROFILE_CSV).display()));
            Ok(())
        }),
        Command::Bench => with_config(spec, &out, |c| {
            for r in cmd_bench(&c, &out)? {
                say(format_args!("{:>8} queries  {:.6} s", r.n_queries, r.seconds));
            }
            Ok(())
        }),
    }
}

/// Prints a line to stdout, ignoring a closed pipe.
fn say(args: std::fmt::Arguments) {
    let _ = writeln!(std::io::stdout(), "{args}");
}

fn with_config<T: Serialize + DeserializeOwned + Default>(
    spec: &RunSpec,
    out: &Path,
    f: impl FnOnce(T) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let cfg: T = config::resolve(spec.config.as_deref(), &spec.all_overrides())?;
    if spec.dry_run {
        say(format_args!("{}", serde_json::to_string_pretty(&cfg).map_err(Error::from)?));
        return Ok(());
    }
    write_snapshot(out, &cfg)?;
    f(cfg)
}

/// Writes the effective config as canonical JSON to `dir/config.json`.
pub fn write_snapshot(dir: &Path, cfg: &impl Serialize) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    let text = surrogate_core::dataio::canonical_json(cfg)?;
    commands::save_text(&dir.join(CONFIG_SNAPSHOT), &text)?;
    Ok(())
}
