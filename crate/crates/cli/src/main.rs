use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vaenmf_cli::{
    cmd_enhance, cmd_evaluate, cmd_experiment, cmd_finetune, cmd_mix, cmd_personalize, cmd_train, CliError,
    ExperimentConfig, InitMode, Overrides,
};

/// VAE-NMF speech enhancement: training, adaptation, enhancement and experiments.
#[derive(Debug, Parser)]
#[command(name = "vaenmf", version)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-utterance and per-speaker jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write diagnostics reports.
    #[arg(long, global = true)]
    diagnostics: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a VAE on the training corpus.
    Train,
    /// Train starting from an existing checkpoint.
    Finetune {
        /// Checkpoint to start from (overrides `init`).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train two personal models per speaker of the training corpus.
    Personalize {
        /// Checkpoint to start from (overrides `init`).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Synthesize noisy mixtures and their mixture lists.
    Mix,
    /// Enhance one noisy recording.
    Enhance {
        input: PathBuf,
        output: PathBuf,
        /// Model checkpoint (overrides `checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clean reference; adds quality deltas to the diagnostics.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Enhance and score every utterance of the test corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured protocol (cross-database, cv-fold or personal).
    Experiment,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let mut overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.out,
        jobs: cli.jobs,
        ..Default::default()
    };
    match &cli.command {
        Command::Finetune { init: Some(p) } => overrides.init = Some(InitMode::Finetune(p.clone())),
        Command::Personalize { init: Some(p) } => overrides.init = Some(InitMode::Personalize(p.clone())),
        Command::Enhance { checkpoint, .. } | Command::Evaluate { checkpoint } => {
            overrides.checkpoint = checkpoint.clone()
        }
        _ => {}
    }
    let cfg = ExperimentConfig::load(&config_path)?.apply(overrides);
    match cli.command {
        Command::Train => cmd_train(&cfg).map(|o| println!("{}", o.checkpoint_path.display())),
        Command::Finetune { .. } => cmd_finetune(&cfg).map(|o| println!("{}", o.checkpoint_path.display())),
        Command::Personalize { .. } => cmd_personalize(&cfg).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Mix => cmd_mix(&cfg).map(|lists| {
            for p in lists {
                println!("{}", p.display());
            }
        }),
        Command::Enhance {
            input,
            output,
            reference,
            ..
        } => cmd_enhance(&cfg, &input, &output, reference.as_deref(), cli.diagnostics).map(|_| ()),
        Command::Evaluate { .. } => cmd_evaluate(&cfg).map(|_| ()),
        Command::Experiment => cmd_experiment(&cfg).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
