//! `thermvis` command-line tool.

mod commands;
mod error;
mod manifest;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "thermvis", version, about = "Thermal-to-visible face synthesis: data, training, evaluation")]
struct Cli {
    /// Root directory for outputs when a command's `--out` is omitted.
    #[arg(long, global = true, env = "THERMVIS_OUT", default_value = "thermvis-out")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic polarimetric/visible face dataset to PNG + CSV.
    GenData(GenDataArgs),
    /// Train a generator (one protocol, or all four).
    Train(TrainArgs),
    /// Train all five loss combinations and compare their ROC curves.
    Ablate(AblateArgs),
    /// Image-quality and verification reports for trained checkpoints.
    Eval(EvalArgs),
    /// Write 8-bit visible-image estimates for every record of a dataset.
    Synthesize(SynthArgs),
    /// Re-run a training run from its run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// One of S0_VIS, POLAR_VIS, S0_VIS_DOG, POLAR_VIS_DOG.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen-data` (manifest.csv, train.csv, test.csv).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// One of E, E+G, E+G+GAN, E+G+GAN+P, ALL.
    #[arg(long)]
    ablation: Option<String>,
    /// Train one run per protocol under `<out>/<PROTOCOL>/`.
    #[arg(long)]
    all_protocols: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMode {
    Quality,
    Verify,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, required_unless_present = "all_protocols")]
    checkpoint: Option<PathBuf>,
    /// Evaluate under this protocol instead of the checkpoint's own.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long, value_enum, default_value_t = EvalMode::Both)]
    mode: EvalMode,
    /// Evaluate the four protocol-matched runs found under `--runs`.
    #[arg(long, requires = "runs", conflicts_with = "checkpoint")]
    all_protocols: bool,
    /// Directory produced by `train --all-protocols`.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// `run_manifest.json` written by `train`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Ablate(a) => commands::ablate(&root, a),
        Command::Eval(a) => commands::eval(&root, a),
        Command::Synthesize(a) => commands::synthesize(&root, a),
        Command::Replay(a) => commands::replay(&root, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("thermvis: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        eprintln!("thermvis: internal error: {msg}");
    }));
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("thermvis: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(2),
    }
}
