//! `rshd`: command line driver for the sanitization pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rshd::sanitizer::SelectionMode;

#[derive(Parser)]
#[command(
    name = "rshd",
    version,
    about = "Saliency-guided Laplace sanitization of speech feature representations",
    after_help = "Environment:\n  RSHD_NUM_WORKERS  maximum number of worker threads [default: one per core]\n  RUST_LOG          log filter [default: warn]"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Master seed; every stage seed is derived from it [default: synth.seed from the config, 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML pipeline configuration; omitted fields keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path (file or directory, depending on the subcommand)
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone)]
pub struct SanitizeFlags {
    /// Percentage of positions to perturb
    #[arg(long = "k", default_value_t = 20.0)]
    pub k: f64,
    /// Laplace privacy parameter; noise scale is 2/epsilon
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Position selection: top-k of the PSE estimate or uniformly random
    #[arg(long, default_value = "pse", value_parser = parse_mode)]
    pub mode: SelectionMode,
    /// Clipping bound applied to selected positions before noising [default: clip_bound from the config, 1.0]
    #[arg(long)]
    pub clip_bound: Option<f64>,
}

fn parse_mode(s: &str) -> Result<SelectionMode, String> {
    s.parse().map_err(|e: rshd::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its SID / ASV partitions
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the speaker-identification model on a speaker manifest
    TrainSid {
        #[command(flatten)]
        common: Common,
        /// SID partition manifest
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute SmoothGrad saliency maps with a trained SID model
    BuildSaliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// SID checkpoint
        #[arg(long)]
        sid: PathBuf,
    },
    /// Train the privacy-risk saliency estimator on a saliency dataset
    TrainPse {
        #[command(flatten)]
        common: Common,
        /// Saliency dataset directory
        #[arg(long)]
        saliency: PathBuf,
    },
    /// Train the verification embedder on speakers disjoint from the SID model's
    TrainEmbedder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// SID checkpoint, used to check speaker disjointness
        #[arg(long)]
        sid: PathBuf,
    },
    /// Train the content classifier used to measure utility
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sanitize every utterance of a manifest
    Sanitize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SanitizeFlags,
        #[arg(long)]
        data: PathBuf,
        /// PSE checkpoint (required in pse mode)
        #[arg(long)]
        pse: Option<PathBuf>,
    },
    /// EER and content accuracy for one sanitizer setting (k 0 gives the clean baseline)
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SanitizeFlags,
        /// Evaluation manifest
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        pse: Option<PathBuf>,
        /// Saliency dataset; adds PSE estimation quality to the report
        #[arg(long)]
        saliency: Option<PathBuf>,
    },
    /// Evaluate the whole (k, epsilon, mode) grid and write it as CSV
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        pse: Option<PathBuf>,
        /// Selection modes to evaluate
        #[arg(long, value_delimiter = ',', default_value = "pse,random", value_parser = parse_mode)]
        modes: Vec<SelectionMode>,
        /// Clipping bound [default: clip_bound from the config, 1.0]
        #[arg(long)]
        clip_bound: Option<f64>,
    },
}

fn run(cli: Cli) -> rshd::Result<serde_json::Value> {
    commands::init_workers()?;
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainSid { common, data } => commands::train_sid(&common, &data),
        Command::BuildSaliency { common, data, sid } => commands::build_saliency(&common, &data, &sid),
        Command::TrainPse { common, saliency } => commands::train_pse(&common, &saliency),
        Command::TrainEmbedder { common, data, sid } => commands::train_embedder(&common, &data, &sid),
        Command::TrainClassifier { common, data } => commands::train_classifier(&common, &data),
        Command::Sanitize {
            common,
            flags,
            data,
            pse,
        } => commands::sanitize(&common, &flags, &data, pse.as_deref()),
        Command::Evaluate {
            common,
            flags,
            data,
            embedder,
            classifier,
            pse,
            saliency,
        } => commands::evaluate(
            &common,
            &flags,
            &data,
            &embedder,
            &classifier,
            pse.as_deref(),
            saliency.as_deref(),
        ),
        Command::Sweep {
            common,
            data,
            embedder,
            classifier,
            pse,
            modes,
            clip_bound,
        } => commands::sweep(
            &common,
            &data,
            &embedder,
            &classifier,
            pse.as_deref(),
            &modes,
            clip_bound,
        ),
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
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("config: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
