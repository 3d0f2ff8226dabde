//! `caecnnloc`: prepare data, train, quantize, evaluate and benchmark
//! WiFi fingerprint localization models.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use caecnnloc::container::Precision;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caecnnloc", version, about = "WiFi fingerprint indoor localization with a convolutional auto-encoder and CNN")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags other than `--config` and
/// `--run-name` only override keys of the config file.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.clf_epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid cell side in meters.
    #[arg(long, global = true)]
    pub cell_length: Option<f64>,
    /// `original` or `combined`.
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true)]
    pub cae_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub clf_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Fixed name for the output directory instead of a timestamp.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
}

impl Common {
    fn all_overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("grid.cell_length", self.cell_length.map(|v| format!("{v:?}")));
        push("split.mode", self.split.as_ref().map(|v| format!("\"{v}\"")));
        push("train.cae_epochs", self.cae_epochs.map(|v| v.to_string()));
        push("train.clf_epochs", self.clf_epochs.map(|v| v.to_string()));
        push("output_dir", self.output_dir.as_ref().map(|v| format!("{:?}", v.display().to_string())));
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Grid the training data and write the split.
    Prepare,
    /// Train the auto-encoder and classifier; write models and curves.
    Train,
    /// Convert a float32 model to float16 and/or int8.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "precision", value_delimiter = ',', default_values = ["f16", "i8"])]
        precisions: Vec<Precision>,
    },
    /// Score a model on the configured test set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train and evaluate once per cell length.
    SweepL {
        #[arg(long, value_delimiter = ',', default_values = ["1", "3", "5", "7", "10", "20", "30", "50"])]
        lengths: Vec<f64>,
    },
    /// Evaluate a model under uniform RSSI noise.
    SweepNoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_values = ["0", "3", "5", "7", "10"])]
        magnitudes: Vec<f64>,
        /// Noise draws per magnitude; seeds are `seed, seed+1, ...`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Single-sample latency of one or more models.
    Bench {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        repetitions: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Test records cycled through during timing.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Localize one scan.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV file in the dataset layout; combine with `--row`.
        #[arg(long, conflicts_with = "rssi")]
        csv: Option<PathBuf>,
        /// Zero-based data row of `--csv`.
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// Raw RSSI values, comma separated, one per AP.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rssi: Option<Vec<f64>>,
        /// Dataset manifest; defaults to the config's, then UJIIndoorLoc.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset, manifest and matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// `toy` or `uji-like`.
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::Prepare => commands::prepare(c),
        Command::Train => commands::train(c),
        Command::Quantize { model, precisions } => commands::quantize(c, &model, &precisions),
        Command::Evaluate { model } => commands::evaluate(c, &model),
        Command::SweepL { lengths } => commands::sweep_l(c, &lengths),
        Command::SweepNoise { model, magnitudes, seeds } => commands::sweep_noise(c, &model, &magnitudes, seeds),
        Command::Bench { models, repetitions, warmup, samples } => commands::bench(c, &models, repetitions, warmup, samples),
        Command::Predict { model, csv, row, rssi, manifest, json } => {
            commands::predict(c, &model, csv.as_deref(), row, rssi, manifest.as_deref(), json)
        }
        Command::Synth { out, preset, data_seed } => commands::synth(&out, &preset, data_seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
