mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedfms::config::ExperimentConfig;
use fedfms::model::TrainMode;
use fedfms::Error;

#[derive(Parser, Debug)]
#[command(name = "fedfms", version, about = "Federated fine-tuning of a miniature segmentation foundation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic per-client corpus and its manifest.
    GenData(Common),
    /// Pseudo-pretrain the adapter-free model and save the checkpoint.
    Pretrain(Common),
    /// Federated leave-one-client-out training.
    TrainFed(Common),
    /// Centralized leave-one-client-out training on pooled client data.
    TrainCentral(Common),
    /// Re-score the checkpoints of a training run on their held-out clients.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by train-fed or train-central.
        #[arg(long)]
        run: PathBuf,
        /// Score ground truth against itself instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Merge training runs into comparison and efficiency tables.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Adapter,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config; defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Start from random weights instead of the pretrained checkpoint.
    #[arg(long)]
    no_pretrained: bool,
    #[arg(long)]
    test_client: Option<u32>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted override such as `trainer.lr=0.0005`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// File, then `--set` overrides, then dedicated flags; validated last.
    fn resolve(&self, fallback: Option<PathBuf>) -> fedfms::Result<ExperimentConfig> {
        let mut cfg = match self.config.as_ref().or(fallback.as_ref()) {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(self.overrides.iter().map(String::as_str))?;
        if let Some(s) = self.seed {
            cfg.federation.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Full => TrainMode::FullFineTune,
                ModeArg::Adapter => TrainMode::AdapterDecoder,
            };
        }
        if self.no_pretrained {
            cfg.pretrained = false;
        }
        if self.test_client.is_some() {
            cfg.federation.test_client = self.test_client;
        }
        if self.threads.is_some() {
            cfg.federation.threads = self.threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::TrainFed(c) => commands::train(&c, fedfms::experiment::Protocol::Federated),
        Command::TrainCentral(c) => commands::train(&c, fedfms::experiment::Protocol::Centralized),
        Command::Eval { common, run, oracle } => commands::eval(&common, &run, oracle),
        Command::Report { runs, out } => commands::report(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
