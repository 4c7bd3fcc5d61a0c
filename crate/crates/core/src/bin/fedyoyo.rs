use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedyoyo::cli::{cmd_generate, cmd_report, cmd_sweep, cmd_train, exit_code};
use fedyoyo::config::{ExperimentConfig, SweepParam};
use fedyoyo::Result;

#[derive(Parser)]
#[command(name = "fedyoyo", version, about = "Federated long-tailed learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `section.key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated variants (overrides run.variants).
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset and partition files and print per-client class counts.
    Generate,
    /// Train every variant on shared data and print a summary table.
    Train,
    /// Paired runs across values of one parameter.
    Sweep {
        /// gamma, lambda, alpha or IF
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Merge round logs into aligned curves.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &cli.variants {
        cfg.run.variants = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = io::stdout().lock();
    if let Command::Report { logs } = &cli.command {
        let mut stderr = io::stderr().lock();
        cmd_report(logs, cli.out.as_deref(), &mut stdout, &mut stderr)?;
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
    match &cli.command {
        Command::Generate => {
            cmd_generate(&cfg, &out, &mut stdout)?;
        }
        Command::Train => {
            cmd_train(&cfg, &out, &mut stdout)?;
        }
        Command::Sweep { param, values } => {
            let param = SweepParam::parse(param)?;
            cmd_sweep(&cfg, param, values, &out, &mut stdout)?;
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
