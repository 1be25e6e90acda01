use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use scl_core::selection::ScheduleKind;
use scl_core::snapshot::Aggregation;
use scl_core::toy::{GroupSpec, ToyDims};

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  usage error or missing input file
  2  malformed or inconsistent input data
  3  numerical degeneracy (zero-norm embedding, too few checkpoints, ...)
  4  training diverged (non-finite loss)

File formats:
  snapshot dir   manifest.json {n, dim, checkpoints, aggregation, kind} plus
                 ckpt_<k>/video.mat and ckpt_<k>/text.mat (or ckpt_<k>/sim.mat
                 when kind = \"similarity\")
  *.mat          one record per line: `id T v_1 ... v_{T*d}`, 17 significant digits
  plan.jsonl     one batch per line: {\"epoch\", \"alpha\", \"batch_index\", \"ids\",
                 \"score\", \"seed_id\"}
  loss.csv       epoch,loss,alpha,mean_batch_score
  fits.csv       i,j,a,b,s0,sK,label,fall_through
  report.csv     category,count,fraction";

/// Curriculum-guided pair selection for contrastive learning.
#[derive(Debug, Parser)]
#[command(name = "scl", version, about, after_help = AFTER_HELP)]
pub struct Cli {
    /// Seed shared by every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for parallel similarity and regression work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset with duplicate-text groups.
    GenData(GenDataArgs),
    /// Train the reference model on shuffled batches and save checkpoint snapshots.
    TrainRef(TrainArgs),
    /// Fit similarity trajectories, compute the delta matrix and classify negatives.
    Analyze(AnalyzeArgs),
    /// Build per-epoch curriculum batch plans from a delta matrix.
    BuildBatches(BuildBatchesArgs),
    /// Train on curriculum-selected batches from a plan file.
    TrainScl(TrainSclArgs),
    /// Render CSV tables and SVG charts from analysis outputs.
    Report(ReportArgs),
    /// Run gen-data, train-ref, analyze, build-batches, train-scl and report in sequence.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataSpec {
    /// Number of paired samples.
    #[arg(long, default_value_t = 64)]
    pub n: usize,

    /// Raw shapes as d_video,d_text,t_video,t_text.
    #[arg(long, default_value = "4,4,3,3")]
    pub dims: ToyDims,

    /// Duplicate-group histogram as size:count,... (default: all singletons).
    #[arg(long)]
    pub groups: Option<GroupSpec>,

    /// Standard deviation of the per-sample video noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub spec: DataSpec,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Learning rate for plain gradient descent.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,

    /// Snapshot every this many epochs (plus epoch 0 and the last epoch).
    #[arg(long, default_value_t = 5)]
    pub interval: usize,

    /// Similarity aggregation used for training.
    #[arg(long, default_value = "mean")]
    pub mode: Aggregation,

    /// Shared embedding width of both projections.
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,

    /// Keep the text projection fixed.
    #[arg(long)]
    pub freeze_text: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value_t = 40)]
    pub epochs: usize,

    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Start from the encoder.json saved in this training output directory.
    #[arg(long)]
    pub init_from: Option<PathBuf>,

    /// Output directory for snapshots, encoder.json and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSclArgs {
    #[arg(long)]
    pub data: PathBuf,

    /// Plan file written by build-batches.
    #[arg(long)]
    pub plan: PathBuf,

    /// Epochs to train (default: every epoch in the plan).
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Nominal batch size; batch composition always comes from the plan.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long)]
    pub init_from: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Snapshot directory (embeddings or precomputed similarities).
    #[arg(long)]
    pub snapshots: PathBuf,

    /// Aggregation for embedding snapshots (default: the one recorded at training).
    #[arg(long)]
    pub mode: Option<Aggregation>,

    /// Threshold on |delta| separating stable from moving pairs.
    #[arg(long, default_value_t = scl_core::trajectory::DEFAULT_EPSILON)]
    pub epsilon: f64,

    /// Only use checkpoints that are multiples of this stride (plus the last).
    #[arg(long)]
    pub stride: Option<usize>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    pub schedule: ScheduleKind,

    /// Epochs of selective training.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
}

#[derive(Debug, Args)]
pub struct BuildBatchesArgs {
    /// delta.mat written by analyze.
    #[arg(long)]
    pub delta: PathBuf,

    #[command(flatten)]
    pub schedule: ScheduleArgs,

    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,

    /// Threshold used for the per-epoch negative profile printed with --verbose.
    #[arg(long, default_value_t = scl_core::trajectory::DEFAULT_EPSILON)]
    pub epsilon: f64,

    /// Never put two samples with identical texts in one batch (needs --data).
    #[arg(long)]
    pub exclude_duplicate_texts: bool,

    /// Dataset directory supplying duplicate-group ids.
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by analyze.
    #[arg(long)]
    pub analysis: PathBuf,

    #[command(flatten)]
    pub schedule: ScheduleArgs,

    /// Training loss logs to chart; repeatable.
    #[arg(long)]
    pub loss: Vec<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub spec: DataSpec,

    /// Epochs of both reference and selective training.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,

    #[arg(long, default_value = "linear")]
    pub schedule: ScheduleKind,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 16)]
    pub ref_batch_size: usize,

    #[arg(long, default_value_t = 8)]
    pub scl_batch_size: usize,

    #[arg(long, default_value_t = scl_core::trajectory::DEFAULT_EPSILON)]
    pub epsilon: f64,

    #[arg(long)]
    pub exclude_duplicate_texts: bool,

    /// Start selective training from the reference model's final weights.
    #[arg(long)]
    pub continue_from_reference: bool,

    /// Root directory for every stage's outputs.
    #[arg(long, default_value = "pipeline_out")]
    pub out: PathBuf,
}
