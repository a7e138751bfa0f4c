use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nps::config::{Backend, ExperimentConfig};
use nps::experiment::{Command, Experiment, RunOptions};
use nps::Result;

/// Learned probabilistic shaping for nonlinear fiber channels.
#[derive(Parser, Debug)]
#[command(name = "nps", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment configuration; a previous run's manifest.toml works too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "nps-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    channel: Option<Backend>,
    /// Launch powers in dBm, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    power_dbm: Option<Vec<f64>>,
    /// Encoder sequence lengths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    length: Option<Vec<usize>>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Encoder checkpoint for eval, sweep-power and dm-test.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint directory for baseline; defaults to <out>/models.
    #[arg(long, global = true)]
    models: Option<PathBuf>,
    /// Also write results.svg.
    #[arg(long, global = true)]
    plot: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Train one encoder per (power, L) pair and evaluate it.
    Train,
    /// Evaluate a checkpoint at each launch power.
    Eval,
    /// Evaluate a frozen checkpoint, or uniform signalling, over launch power.
    SweepPower,
    /// Train and evaluate one encoder per L at a single launch power.
    SweepLength,
    /// Compare uniform, Maxwell-Boltzmann and trained encoders.
    Baseline,
    /// Distribution matcher round trip and rate loss.
    DmTest,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::SweepPower => Command::SweepPower,
            Cmd::SweepLength => Command::SweepLength,
            Cmd::Baseline => Command::Baseline,
            Cmd::DmTest => Command::DmTest,
        }
    }
}

fn resolve(cli: &Cli) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    // Paths recorded in a manifest only apply when rerunning the same command.
    let run = cfg
        .run
        .take()
        .filter(|r| r.command == Command::from(cli.command).name())
        .unwrap_or_default();
    let e = &mut cfg.experiment;
    if let Some(s) = cli.seed {
        e.seed = s;
    }
    if let Some(c) = cli.channel {
        e.channel = c;
    }
    if let Some(p) = &cli.power_dbm {
        e.power_dbm = p.clone();
    }
    if let Some(l) = &cli.length {
        e.lengths = l.clone();
    }
    if let Some(w) = cli.workers {
        e.workers = w;
    }
    cfg.validate()?;
    let opts = RunOptions {
        checkpoint: cli.checkpoint.clone().or(run.checkpoint.map(PathBuf::from)),
        models: cli.models.clone().or(run.models.map(PathBuf::from)),
        plot: cli.plot,
    };
    Ok((cfg, opts))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, opts) = resolve(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let exp = Experiment::new(cfg)?;
    exp.run(cli.command.into(), &opts, &cli.out)?;
    eprintln!("wrote {}", cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nps: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
