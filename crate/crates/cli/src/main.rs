//! `hsfs`: synthesize, prepare, train, build collective prototypes, evaluate
//! and export reports for few-shot hyperspectral classification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{EvalProtocol, Layout, Overrides, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(
    name = "hsfs",
    version,
    about = "Few-shot hyperspectral cube classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for synthesis, splitting, initialization, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Channel attention in the embedding.
    #[arg(long, global = true, value_enum)]
    attention: Option<OnOff>,
    /// Spectral channels of synthesized cubes.
    #[arg(long, global = true, value_name = "INT")]
    channels: Option<usize>,
    /// Channel-average reduction factor applied by `prep`.
    #[arg(long, global = true, value_name = "INT")]
    reduce_factor: Option<usize>,
    /// Evaluation protocol.
    #[arg(long, global = true, value_enum)]
    protocol: Option<EvalProtocol>,
    /// Classes held out of training and used by the partial-class protocols.
    #[arg(
        long,
        global = true,
        value_name = "CLASS[,CLASS]",
        value_delimiter = ','
    )]
    exclude: Option<Vec<String>>,
    /// Root directory for data, model and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset with train/test manifests.
    Synth,
    /// Trim, reduce, crop, density-filter and split a dataset.
    Prep,
    /// Train the embedding on episodes; writes checkpoint and training log.
    Train,
    /// Build collective class prototypes from the training log.
    Ccp,
    /// Evaluate the trained model under the selected protocol.
    Eval {
        /// Also train and evaluate the cross-entropy baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Export attention heatmap, embeddings and confusion differences.
    Report {
        /// Two eval result documents whose confusion matrices are differenced.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
}

fn run(cli: Cli) -> anyhow::Result<commands::Outcome> {
    let c = &cli.common;
    let mut config = RunConfig::load(c.config.as_deref())?;
    config.apply(&Overrides {
        seed: c.seed,
        attention: c.attention.map(|a| matches!(a, OnOff::On)),
        channels: c.channels,
        reduce_factor: c.reduce_factor,
        protocol: c.protocol,
        exclude: c.exclude.clone(),
    });
    if let Command::Eval { baseline: true } = cli.command {
        config.eval.baseline = true;
    }
    config.validate()?;
    let layout = Layout::new(&c.out, &config.paths);
    match &cli.command {
        Command::Synth => commands::synth(&config, &layout),
        Command::Prep => commands::prep(&config, &layout),
        Command::Train => commands::train_cmd(&config, &layout),
        Command::Ccp => commands::ccp(&config, &layout),
        Command::Eval { .. } => commands::eval(&config, &layout),
        Command::Report { compare } => commands::report(&config, &layout, compare.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{} [{}]", outcome.summary, outcome.document.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
