use std::path::PathBuf;

use aro_core::eval::ReportFormat;
use aro_core::perturb::PerturbationStrategy;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::MineTask;

#[derive(Debug, Parser)]
#[command(name = "aro", version, about = "Compositional probes, perturbations, evaluation and head training over precomputed embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (u64).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-item parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine relation and attribution test cases from scene graphs.
    Mine(MineArgs),
    /// Apply word-order perturbations to captions.
    Perturb(PerturbArgs),
    /// Generate constituent-swap negative captions.
    Negatives(NegativesArgs),
    /// Shuffle image patches on a grid.
    ShuffleImages(ShuffleArgs),
    /// Exact top-k cosine neighbours within an embedding set.
    Neighbors(NeighborsArgs),
    /// Score relation/attribution test cases.
    EvalAro(EvalAroArgs),
    /// Score order tasks.
    EvalOrder(EvalOrderArgs),
    /// Recall@K for image-text retrieval.
    EvalRetrieval(EvalRetrievalArgs),
    /// Train projection heads with the hard-negative contrastive objective.
    Train(TrainArgs),
    /// Combine evaluation reports into one file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

fn parse_strategy(s: &str) -> Result<PerturbationStrategy, String> {
    s.parse().map_err(|e: aro_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Scene graphs, one JSON object per line.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Which case families to emit.
    #[arg(long, value_enum)]
    pub task: Option<MineTask>,
    /// Extra symmetric predicates to block (repeatable).
    #[arg(long = "symmetric")]
    pub symmetric: Vec<String>,
    /// Crop manifest for the image extractor.
    #[arg(long)]
    pub image_manifest: Option<PathBuf>,
    /// Unique caption strings for the text extractor.
    #[arg(long)]
    pub text_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionInput {
    /// Captions JSONL: `{id, caption}` or `{id, tokens, tags}`, optional `image_id`.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Word → tag lexicon (JSON object); the built-in one is used otherwise.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub input: CaptionInput,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Strategy to apply (repeatable); defaults to all.
    #[arg(long = "strategy", value_parser = parse_strategy)]
    pub strategies: Vec<PerturbationStrategy>,
    /// Emit one order task per caption instead of individual perturbations.
    #[arg(long)]
    pub order_task: bool,
    /// Unique caption strings for the text extractor.
    #[arg(long)]
    pub text_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[command(flatten)]
    pub input: CaptionInput,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Unique caption strings for the text extractor.
    #[arg(long)]
    pub text_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShuffleArgs {
    /// Images JSONL: `{id, path}`; relative paths resolve against the file.
    #[arg(long)]
    pub images: PathBuf,
    /// Grid preset (`rows4`, `cols4`, `patches9`) or `RxC`.
    #[arg(long, default_value = "patches9")]
    pub grid: String,
    /// Directory for shuffled PNGs and `manifest.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    /// Embedding set (AROE).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Neighbours per row.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbeddingInput {
    /// Image embedding set (AROE).
    #[arg(long)]
    pub image_embeddings: Option<PathBuf>,
    /// Text embedding set (AROE).
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// Project both sets through trained heads before scoring.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportOut {
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Dataset label stored in the report; defaults to the input file stem.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalAroArgs {
    /// Test cases JSONL from `mine`.
    #[arg(long)]
    pub cases: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingInput,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct EvalOrderArgs {
    /// Order tasks JSONL from `perturb --order-task`.
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingInput,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    /// Pairs JSONL: `{image_id, text_id, split?}`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Only score pairs whose `split` matches.
    #[arg(long)]
    pub split: Option<String>,
    /// Recall cut-offs (repeatable).
    #[arg(long = "k")]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub embeddings: EmbeddingInput,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image embedding set (AROE).
    #[arg(long)]
    pub image_embeddings: Option<PathBuf>,
    /// Text embedding set (AROE).
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// Pairs JSONL: `{image_id, text_id, split?, negatives?}`; split `val` is held out.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output of `negatives`, joined on the caption text.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss/learning-rate trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub neighbor_k: Option<usize>,
    #[arg(long)]
    pub use_neg_captions: Option<bool>,
    #[arg(long)]
    pub use_neg_images: Option<bool>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub d_out: Option<usize>,
    /// Use a one-hidden-layer head of this width.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by the eval commands.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Combined report file.
    #[arg(long)]
    pub out: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
}
