use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frest_kit::{resolve, run, Command, Sources};

#[derive(Parser)]
#[command(name = "frest-kit", version, about = "Source-free adverse-condition adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `hp.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    device: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate and export the dataset.
    Synth,
    /// Train encoder and decoder on the labeled source scenes.
    Pretrain,
    /// Run two-step adaptation from the pretrained checkpoint.
    Adapt,
    /// Score the source and adapted checkpoints.
    Eval,
    /// Feature-shift distances over adaptation snapshots and embedding export.
    Analyze,
    /// Run the configured ablation grids.
    Ablate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Adapt => Command::Adapt,
            Cmd::Eval => Command::Eval,
            Cmd::Analyze => Command::Analyze,
            Cmd::Ablate => Command::Ablate,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = cli.common;
    let sources = Sources { config: c.config, set: c.set, seed: c.seed, out: c.out, device: c.device };
    let result = resolve(&sources).and_then(|cfg| run(cli.command.into(), &cfg));
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
