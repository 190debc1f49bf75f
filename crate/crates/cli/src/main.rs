use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Deposit/withdrawal association for mixing services with transferred
/// malicious-account knowledge.
///
/// Exit status: 0 success, 2 usage or configuration error, 3 data error,
/// 4 training divergence, 1 any other failure.
#[derive(Debug, Parser)]
#[command(name = "mixlink", version)]
struct Cli {
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for independent trials (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    #[value(alias = "few_shot")]
    FewShot,
    Noise,
    Imbalance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Mcd,
    #[value(alias = "no_transfer")]
    NoTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Reference {
    /// F1 of the full labeled set without noise.
    Full,
    /// F1 at 5% noise.
    Eta5,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (source.csv, accounts.csv, edges.csv, pairs.csv).
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder, fit the adapter and run transfer; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Run directory receiving checkpoint/, train_log.csv and encoder_log.csv.
        #[arg(long)]
        run_dir: PathBuf,
        /// Corpus directory written by `synth`, overriding the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Transfer strategy, overriding the configuration.
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
    },
    /// Fine-tune the association classifier under an evaluation protocol.
    FinetuneEval {
        /// Checkpoint directory written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Run directory receiving the reports.
        #[arg(long)]
        run_dir: PathBuf,
        /// Corpus directory written by `synth`, overriding the checkpoint's data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Few-shot sizes, comma separated; `all` for the full labeled set.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<String>>,
        /// Noise rates, comma separated.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        /// Imbalance ratios as `1:k` or `k`, comma separated.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<String>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        /// Clean reference for degradation rates in the noise protocol.
        #[arg(long, value_enum, default_value = "full")]
        reference: Reference,
    },
    /// Maximum mean discrepancy between the rows of two CSV files.
    Mmd {
        x: PathBuf,
        y: PathBuf,
        /// Project the wider table onto its principal directions to match the narrower.
        #[arg(long)]
        pca_align: bool,
        /// Kernel bandwidth; the median pairwise distance when omitted.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Gas-price fingerprint matches of a target graph.
    BaselineGf {
        /// Directory with accounts.csv and edges.csv (and optionally pairs.csv).
        #[arg(long)]
        data: PathBuf,
        /// Run directory receiving matches.csv.
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Generator outputs for source samples and target pairs.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory receiving embeddings.csv.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Export at most this many source samples.
        #[arg(long)]
        max_source: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().expect("first pool");
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
