use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdd_lab::config::{parse_overrides, Experiment, ExperimentConfig};
use sdd_lab::experiment::{self, EntropyJson};
use sdd_lab::{io, LabError, Result};

#[derive(Parser)]
#[command(name = "sdd-lab", version, about = "Iterative pruning, distillation and entropy probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment TOML file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides such as `--train.epochs 5` or `--prune.wall=0.5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dense training only; writes a checkpoint per seed.
    Train(ConfigArgs),
    /// Vanilla iterative pruning sweep.
    Sweep(ConfigArgs),
    /// Pruning sweep distilling from a dense teacher checkpoint.
    Distill(ConfigArgs),
    /// Entropy-gated early-stopping controller.
    EarlyStop(ConfigArgs),
    /// Activation entropy of a checkpoint.
    Entropy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Phase labels and best round of a sweep CSV.
    Report {
        csv: PathBuf,
        #[arg(long, default_value_t = sdd_core::pipeline::DEFAULT_PHASE_MARGIN)]
        margin: f64,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(&args.overrides)?;
    ExperimentConfig::load(&args.config, &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let threads = experiment::thread_count()?;
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            experiment::for_each_seed(&cfg.seeds(), threads, |s| experiment::run_train(&cfg, s))?;
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            experiment::expect_experiment(&cfg, Experiment::Sweep)?;
            experiment::for_each_seed(&cfg.seeds(), threads, |s| experiment::run_sweep(&cfg, s, false).map(drop))?;
        }
        Command::Distill(args) => {
            let cfg = load(&args)?;
            experiment::expect_experiment(&cfg, Experiment::Distill)?;
            experiment::for_each_seed(&cfg.seeds(), threads, |s| experiment::run_sweep(&cfg, s, true).map(drop))?;
        }
        Command::EarlyStop(args) => {
            let cfg = load(&args)?;
            experiment::expect_experiment(&cfg, Experiment::EarlyStop)?;
            let runs = experiment::for_each_seed(&cfg.seeds(), threads, |s| experiment::run_early_stop(&cfg, s))?;
            for r in runs {
                print!("{}", io::to_json(&r.summary));
            }
        }
        Command::Entropy { checkpoint, args } => {
            let cfg = load(&args)?;
            let report = experiment::run_entropy(&cfg, &checkpoint)?;
            print!("{}", io::to_json(&EntropyJson::from(&report)));
        }
        Command::Report { csv, margin } => {
            if !(margin >= 0.0) {
                return Err(LabError::Config("margin: must be non-negative".into()));
            }
            let records = io::read_csv(&csv)?;
            print!("{}", io::to_json(&io::summarize(&records, margin)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
