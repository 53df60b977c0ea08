mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multimodal translation workbench: masking, synthetic features, training,
/// decoding and probing evaluation.
#[derive(Parser, Debug)]
#[command(name = "mmt-probe", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment configuration file (`[section]` + `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.d_model=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mask colours, characters or nouns in a tokenised source file.
    Mask(commands::MaskArgs),
    /// Generate a synthetic parallel corpus with its lexicon.
    GenCorpus(commands::GenCorpusArgs),
    /// Write planted-signal feature files for a masked corpus.
    GenFeatures(commands::GenFeaturesArgs),
    /// Train a model from the configured corpus.
    Train,
    /// Decode a source file with a trained model.
    Translate(commands::TranslateArgs),
    /// Score hypotheses: BLEU and, with a sidecar, probing accuracy.
    Evaluate(commands::EvaluateArgs),
    /// Probing accuracy under both criteria.
    Probe(commands::ProbeArgs),
    /// BLEU with congruent and with shuffled image features.
    Congruence(commands::CongruenceArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(commands::GradcheckArgs),
    /// Write the selective-attention map of one sentence as CSV.
    DumpAttn(commands::DumpAttnArgs),
    /// Average checkpoint files parameter-wise.
    AvgCkpt(commands::AvgCkptArgs),
}

fn init_logging() {
    let level = match std::env::var("MMT_PROBE_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
