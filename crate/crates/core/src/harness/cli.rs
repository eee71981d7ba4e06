use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{load_results, render_report, run_ablation, run_experiment, ResultsFile};
use crate::theory::{verify_theory, TheoryConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUN: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dmilo", version, about = "Intermediate-layer diffusion solvers on analytic priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config and write results.json / results.csv.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the numerical theory checks and print a JSON report.
    VerifyTheory {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a config once per value of one field, with paired trial seeds.
    Ablate {
        config: PathBuf,
        /// Dotted field path, e.g. solver.sparse_deviation.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; on/off are read as booleans.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print a table from a results file.
    Report { results: PathBuf },
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(t) = o.trials {
        cfg.trials = t;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUN
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let io = |source| Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    match cmd {
        Command::Solve { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let result = run_experiment(&cfg)?;
            result.write(&cfg.output)?;
            write!(out, "{}", render_report(&ResultsFile::Single(result.clone()))?).map_err(io)?;
            writeln!(out, "wrote {}", cfg.output.join("results.json").display()).map_err(io)?;
            for t in result.trials.iter().filter(|t| t.error.is_some()) {
                writeln!(err, "trial {} failed: {}", t.trial, t.error.as_deref().unwrap_or("")).map_err(io)?;
            }
            Ok(if result.failed() { EXIT_RUN } else { EXIT_OK })
        }
        Command::VerifyTheory { config, seed, out: file } => {
            let text = std::fs::read_to_string(&config).map_err(|source| Error::Io {
                path: config.clone(),
                source,
            })?;
            let mut cfg: TheoryConfig = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = verify_theory(&cfg)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = file {
                std::fs::write(&path, &json).map_err(|source| Error::Io { path, source })?;
            }
            writeln!(out, "{json}").map_err(io)?;
            Ok(if report.all_pass { EXIT_OK } else { EXIT_RUN })
        }
        Command::Ablate {
            config,
            axis,
            values,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let result = run_ablation(&cfg, &axis, &values)?;
            result.write(&cfg.output)?;
            write!(out, "{}", render_report(&ResultsFile::Ablation(result.clone()))?).map_err(io)?;
            writeln!(out, "wrote {}", cfg.output.join("ablation.json").display()).map_err(io)?;
            Ok(if result.failed() { EXIT_RUN } else { EXIT_OK })
        }
        Command::Report { results } => {
            let file = load_results(&results)?;
            write!(out, "{}", render_report(&file)?).map_err(io)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 ok, 1 config or usage error, 2 run failure.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
