use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use forest_transfer_cli::commands;
use forest_transfer_cli::config::RunConfig;
use forest_transfer_cli::{exit_code, EXIT_CONFIG};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Pretrain,
    Finetune,
    Predict,
    Evaluate,
    Baseline,
    Experiment,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Channels {
    S2,
    S1s2,
    Ms,
}

/// SeUNet forest-height model transfer on synthetic EO scenes.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// EO channel combination.
    #[arg(long, value_enum)]
    channels: Option<Channels>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(ch) = cli.channels {
        let name = match ch {
            Channels::S2 => "s2",
            Channels::S1s2 => "s1s2",
            Channels::Ms => "ms",
        };
        cfg.channels = name.into();
        cfg.baseline_channel_sets = vec![name.into()];
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let result = match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::Predict => commands::cmd_predict(&cfg),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Baseline => commands::cmd_baseline(&cfg),
        Command::Experiment => commands::cmd_experiment(&cfg),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
