//! `lrforge`: command-line driver for optimizer and schedule evolution.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 configuration error,
//! 3 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, EvolveFlags, EvolveKind, Overrides};

#[derive(Parser)]
#[command(name = "lrforge", version, about = "Grammar-guided evolution of learning-rate optimizers and schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on parallel evaluations.
    #[arg(long)]
    workers: Option<usize>,
    /// Parent directory for run outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory holding IDX or CIFAR files.
    #[arg(long, env = "LRFORGE_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            out_dir: self.out_dir.clone(),
            data_dir: self.data_dir.clone(),
        }
    }
}

#[derive(Args, Clone, Debug)]
struct EvolveCmd {
    #[command(flatten)]
    common: Common,
    /// Override the number of bred generations.
    #[arg(long)]
    generations: Option<usize>,
    /// Stop once this generation is evaluated; resume later from the
    /// checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue from a `checkpoint.json`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl EvolveCmd {
    fn flags(&self) -> EvolveFlags {
        EvolveFlags {
            common: self.common.overrides(),
            generations: self.generations,
            stop_after: self.stop_after,
            resume: self.resume.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evolve an adaptive optimizer.
    Evolve(EvolveCmd),
    /// Evolve a learning-rate schedule for plain SGD.
    DlrEvolve(EvolveCmd),
    /// Train each listed optimizer repeatedly and tabulate accuracy.
    Benchmark(Common),
    /// Bayesian search over optimizer hyperparameters.
    Tune(Common),
    /// Check an optimizer grammar (the built-in one when no path is given).
    GrammarCheck {
        grammar: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evolve(c) => commands::cmd_evolve(&c.common.config, EvolveKind::Optimizer, &c.flags()).map(drop),
        Command::DlrEvolve(c) => commands::cmd_evolve(&c.common.config, EvolveKind::Schedule, &c.flags()).map(drop),
        Command::Benchmark(c) => commands::cmd_benchmark(&c.config, &c.overrides()).map(drop),
        Command::Tune(c) => commands::cmd_tune(&c.config, &c.overrides()).map(drop),
        Command::GrammarCheck { grammar } => commands::cmd_grammar_check(grammar.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrforge: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
