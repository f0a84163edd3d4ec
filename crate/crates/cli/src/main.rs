//! `uvlm`: build the synthetic corpus, train the three stages, generate
//! answers and score them.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A mistake in how the tool was invoked, reported with exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(
    name = "uvlm",
    version,
    about = "User-aware tuning of a toy vision-language model"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides UVLM_OUTPUT_ROOT and `output_root`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Published epoch counts, batch sizes and adapter rank.
    #[arg(long, global = true)]
    pub paper_faithful: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Corpus operations.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run one training stage.
    Train(TrainArgs),
    /// Answer a question about an image.
    Generate(GenerateArgs),
    /// Score a checkpoint, or print the FLOPs comparison.
    Eval(EvalArgs),
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Generate the synthetic corpus.
    Build(DataBuildArgs),
}

#[derive(Args, Debug)]
pub struct DataBuildArgs {
    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record the published 8000/1000/1000 split counts in the manifest.
    #[arg(long)]
    pub paper_proportions: bool,
    /// Replace an existing corpus in the target directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Align,
    Instruct,
    Dpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdapterArg {
    Lora,
    Mole,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long, value_enum)]
    pub adapter: Option<AdapterArg>,
    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to continue from (default: the previous stage's output).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Run even though the previous stage has not completed.
    #[arg(long)]
    pub allow_skip: bool,
    /// Continue an interrupted run of this stage.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many batches, leaving a resumable checkpoint.
    #[arg(long)]
    pub max_batches: Option<u64>,
    /// Write a resumable checkpoint every N batches.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image tensor file as written by `data build`.
    #[arg(long)]
    pub image: PathBuf,
    /// May be empty, which asks for the profile description.
    #[arg(long, default_value = "")]
    pub question: String,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Print a JSON object instead of plain text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Linear,
    Quadratic,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL benchmark; instruction records, or preference records with
    /// --bias (default: the corpus file under <out>/data).
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma-separated: rouge1, rouge_l, similarity.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Score preference questions with the zero rule.
    #[arg(long)]
    pub bias: bool,
    /// Print the FLOPs comparison; needs no checkpoint.
    #[arg(long)]
    pub flops: bool,
    #[arg(long, value_enum, default_value = "linear")]
    pub cost_model: CostArg,
    /// Attention coefficient of the quadratic cost model.
    #[arg(long, default_value_t = 0.0)]
    pub attention: f64,
    /// Add a custom comparison: baseline parameters, baseline tokens, our
    /// parameters, our tokens.
    #[arg(long, num_args = 4, value_names = ["BASE_PARAMS", "BASE_TOKENS", "OURS_PARAMS", "OURS_TOKENS"])]
    pub compare: Option<Vec<f64>>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use uvlm::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::PipelineOrder(_) | E::Validation(_) => 1,
                E::Data(_)
                | E::Json { .. }
                | E::Io { .. }
                | E::Checkpoint(_)
                | E::Capacity { .. } => 2,
                E::NonFinite { .. } | E::Dimension { .. } | E::Index { .. } | E::Contract(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
