use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kpgroup::ingest::IngestError;

mod commands;

/// Keypoint grouping toolkit for multi-class keypoint detectors.
#[derive(Debug, Parser)]
#[command(name = "kpg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster keypoint types into shared head channels.
    Group(GroupArgs),
    /// Compare two groupings (or two dendrograms) with the adjusted Rand index.
    Consensus(ConsensusArgs),
    /// Check a grouping for restrictions and ambiguity, and tabulate ambiguity over cuts.
    Analyze(AnalyzeArgs),
    /// Head channel counts and output-tensor memory.
    Budget(BudgetArgs),
    /// Decode head tensors listed in a manifest into detections with keypoints.
    Decode(DecodeArgs),
    /// Render synthetic head tensors with ground truth.
    Synth(SynthArgs),
    /// Pick the rescoring sigma with the best PCK on labeled scenes.
    SweepSigma(SweepArgs),
    /// Average per-keypoint head weights into grouped head weights.
    InitWeights(InitWeightsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Offsets,
    AntiOffsets,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Reg,
    Heat,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkageArg {
    Average,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Restricted,
    Unrestricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefineArg {
    Base,
    Rescore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    /// Keypoint schema JSON (path).
    #[arg(long)]
    pub schema: PathBuf,
    /// Dissimilarity source.
    #[arg(long, value_enum)]
    pub method: Method,
    /// COCO-style annotation JSON for offsets methods (path).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Last-layer weights of the per-keypoint head, NPY with one row per output channel (path).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Bias vector of that layer, NPY, appended to each feature (path).
    #[arg(long)]
    pub bias: Option<PathBuf>,
    /// Head whose labels are produced; `both` is only valid for offsets methods.
    #[arg(long, value_enum, default_value = "heat")]
    pub head: HeadArg,
    /// Number of clusters to cut at (count).
    #[arg(long)]
    pub clusters: usize,
    /// Linkage rule [default: complete for anti-offsets, average otherwise].
    #[arg(long, value_enum)]
    pub linkage: Option<LinkageArg>,
    /// Forbid same-class keypoints from sharing a cluster.
    #[arg(long)]
    pub restrict: bool,
    /// Existing grouping JSON whose other head is kept (path) [default: identity].
    #[arg(long)]
    pub merge_into: Option<PathBuf>,
    /// Write the dendrogram JSON here (path).
    #[arg(long)]
    pub dendrogram_out: Option<PathBuf>,
    /// Write the dissimilarity matrix as (n, n) f64 NPY here (path).
    #[arg(long)]
    pub matrix_out: Option<PathBuf>,
    /// Output grouping JSON (path).
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    /// First grouping JSON, or dendrogram JSON with --dendrograms (path).
    pub a: PathBuf,
    /// Second grouping JSON, or dendrogram JSON with --dendrograms (path).
    pub b: PathBuf,
    /// Treat inputs as dendrograms and report ARI per cut.
    #[arg(long)]
    pub dendrograms: bool,
    /// Cluster counts to cut both dendrograms at, comma separated (counts).
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Keypoint schema JSON (path).
    #[arg(long)]
    pub schema: PathBuf,
    /// Grouping JSON to check (path).
    #[arg(long)]
    pub grouping: Option<PathBuf>,
    /// Validity mode for the grouping check.
    #[arg(long, value_enum, default_value = "unrestricted")]
    pub mode: ModeArg,
    /// Regression-head dendrogram JSON for the ambiguity matrix (path).
    #[arg(long, requires = "dendrogram_heat")]
    pub dendrogram_reg: Option<PathBuf>,
    /// Heatmap-head dendrogram JSON for the ambiguity matrix (path).
    #[arg(long, requires = "dendrogram_reg")]
    pub dendrogram_heat: Option<PathBuf>,
    /// Regression cluster counts, comma separated (counts) [default: 1..=n].
    #[arg(long, value_delimiter = ',')]
    pub counts_reg: Vec<usize>,
    /// Heatmap cluster counts, comma separated (counts) [default: 1..=n].
    #[arg(long, value_delimiter = ',')]
    pub counts_heat: Vec<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Number of object classes (count).
    #[arg(long)]
    pub classes: usize,
    /// Grouping JSON supplying both cluster counts (path).
    #[arg(long, conflicts_with_all = ["m_reg", "m_heat", "keypoints"])]
    pub grouping: Option<PathBuf>,
    /// Regression clusters (count).
    #[arg(long, requires = "m_heat", conflicts_with = "keypoints")]
    pub m_reg: Option<usize>,
    /// Heatmap clusters (count).
    #[arg(long, requires = "m_reg", conflicts_with = "keypoints")]
    pub m_heat: Option<usize>,
    /// Total keypoint types, ungrouped layout (count).
    #[arg(long)]
    pub keypoints: Option<usize>,
    /// Only report this square input size (input pixels).
    #[arg(long)]
    pub resolution: Option<u64>,
    /// Encoder profile JSON with weights and activations (path) [default: bundled].
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeOptions {
    /// Keypoint refinement mode.
    #[arg(long, value_enum, default_value = "rescore")]
    pub refine: RefineArg,
    /// Rescoring mask standard deviation (feature-grid pixels).
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    /// Maximum detections per image (count).
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    /// Minimum center heatmap peak (score in [0, 1]).
    #[arg(long, default_value_t = 0.1)]
    pub center_thresh: f64,
    /// Minimum keypoint heatmap peak for base refinement (score in [0, 1]).
    #[arg(long, default_value_t = 0.1)]
    pub kp_thresh: f64,
    /// Images decoded in parallel (threads).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Decode manifest JSON (path).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub options: DecodeOptions,
    /// Output-to-input downsampling factor applied when writing coordinates (input pixels per grid pixel).
    #[arg(long, default_value_t = 4.0)]
    pub stride: f64,
    /// Output detections JSON (path).
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON to render (path).
    #[arg(long, conflicts_with_all = ["figure4", "random"])]
    pub scene: Option<PathBuf>,
    /// Render the canned closest-peak failure case.
    #[arg(long, conflicts_with = "random")]
    pub figure4: bool,
    /// Generate this many random separable scenes (count).
    #[arg(long)]
    pub random: Option<usize>,
    /// Random generator seed (integer).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keypoint schema JSON (path); required unless --figure4.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Grouping JSON (path) [default: identity].
    #[arg(long)]
    pub grouping: Option<PathBuf>,
    /// Tensor element type.
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
    /// Output directory for tensors, ground truth and manifest.json (path).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Decode manifest whose images carry ground truth (path).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Candidate sigmas, comma separated (feature-grid pixels).
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigmas: Vec<f64>,
    /// PCK distance threshold (fraction of the larger box side).
    #[arg(long, default_value_t = 0.05)]
    pub pck: f64,
    /// Maximum detections per image (count).
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    /// Minimum center heatmap peak (score in [0, 1]).
    #[arg(long, default_value_t = 0.1)]
    pub center_thresh: f64,
    /// Write the sweep as JSON here (path).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    /// Per-keypoint head weights, NPY with one row per output channel (path).
    #[arg(long)]
    pub weights: PathBuf,
    /// Grouping JSON (path).
    #[arg(long)]
    pub grouping: PathBuf,
    /// Head the weights belong to.
    #[arg(long, value_enum)]
    pub head: HeadArg,
    /// Output grouped weights NPY (path).
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-keypoint bias vector NPY (path).
    #[arg(long, requires = "bias_out")]
    pub bias: Option<PathBuf>,
    /// Output grouped bias NPY (path).
    #[arg(long, requires = "bias")]
    pub bias_out: Option<PathBuf>,
    /// Write the cluster membership map JSON here (path).
    #[arg(long)]
    pub map_out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<IngestError>().is_some_and(IngestError::is_io) {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KPG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Group(a) => commands::group(a),
        Command::Consensus(a) => commands::consensus(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Budget(a) => commands::budget(a),
        Command::Decode(a) => commands::decode(a),
        Command::Synth(a) => commands::synth(a),
        Command::SweepSigma(a) => commands::sweep_sigma(a),
        Command::InitWeights(a) => commands::init_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
