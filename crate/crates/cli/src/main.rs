mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipeline::{Select, Split};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<vpboost::Error> for CliError {
    fn from(e: vpboost::Error) -> Self {
        use vpboost::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::Numerical(_) => CliError::Numerical(msg),
            E::Input(_) => CliError::Config(msg),
            E::Io(_) => CliError::Io(msg),
            _ => CliError::Data(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "vpboost", version, about = "Variable-projection boosting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set boost.gamma_up=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to CSV, one file per seed.
    GenData(Common),
    /// Boost one ensemble per seed and write metrics, ensembles and a summary.
    Train(Common),
    /// Score a saved ensemble on one split of its seed's data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Select::BestVal)]
        select: Select,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Recompute per-learner regularity diagnostics of a saved run.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Seeds to inspect; defaults to every configured seed.
        #[arg(long)]
        seed: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = config::load(&c.config, &c.overrides)?;
            for path in pipeline::gen_data(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Train(c) => {
            let cfg = config::load(&c.config, &c.overrides)?;
            for o in pipeline::train(&cfg)? {
                for s in &o.selections {
                    println!(
                        "seed {} {}: stage {} train {:e} val {:e} test {:e}",
                        o.seed, s.name, s.stage, s.train_loss, s.val_loss, s.test_loss
                    );
                }
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Evaluate { common, seed, select, split } => {
            let cfg = config::load(&common.config, &common.overrides)?;
            let ev = pipeline::evaluate(&cfg, seed, select, split)?;
            println!("stage,{}", ev.stage);
            println!("loss,{:e}", ev.loss);
            for (name, value) in ev.metrics {
                println!("{name},{}", value.map(|v| format!("{v:e}")).unwrap_or_default());
            }
        }
        Command::Diagnose { common, seed } => {
            let cfg = config::load(&common.config, &common.overrides)?;
            let seeds = if seed.is_empty() { cfg.config.run.seeds.clone() } else { seed };
            println!("{}", pipeline::DIAGNOSTICS_HEADER.join(","));
            for s in seeds {
                for row in pipeline::diagnose(&cfg, s)? {
                    println!("{}", row.join(","));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpboost: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
