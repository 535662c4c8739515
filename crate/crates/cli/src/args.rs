use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use makeup_core::Target;

#[derive(Debug, Parser)]
#[command(
    name = "makeup",
    version,
    about = "Parametric makeup rendering and material estimation",
    propagate_version = true
)]
pub struct Cli {
    /// Seed for every random choice made by the command
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,

    /// Worker threads; 0 uses every core, 1 runs serially
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// More log output (repeatable)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    /// Only log errors
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled crop dataset from sampled materials
    GenData(GenDataArgs),
    /// Train the parameter regressor on a dataset
    Train(TrainArgs),
    /// Estimate the material on a reference photo
    Estimate(EstimateArgs),
    /// Apply a material to one image
    Render(RenderArgs),
    /// Apply a material to a directory of frames
    RenderVideo(RenderVideoArgs),
    /// Score estimate-and-transfer on reference/source/ground-truth triplets
    EvalTriplets(EvalTripletsArgs),
    /// Score parameter recovery on a labelled dataset
    EvalRecovery(EvalRecoveryArgs),
    /// Recover a material by derivative-free search against the renderer
    Oracle(OracleArgs),
    /// Time the render stages
    Profile(ProfileArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RenderStyle {
    /// Makeup region
    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Strength multiplier in [0, 1]
    #[arg(long, default_value_t = 1.0)]
    pub intensity: f64,

    /// Mask feathering in pixels
    #[arg(long, default_value_t = makeup_core::geometry::DEFAULT_FEATHER_SIGMA)]
    pub feather: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,

    /// Number of samples
    #[arg(long, default_value_t = 2000)]
    pub n: usize,

    /// Makeup region
    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Crop side in pixels
    #[arg(long, default_value_t = makeup_core::geometry::DEFAULT_CROP_SIZE)]
    pub crop_size: usize,

    /// Number of procedural portraits (ignored with --portrait-list)
    #[arg(long, default_value_t = makeup_core::datagen::DEFAULT_PORTRAIT_COUNT)]
    pub portraits: usize,

    /// Side of the procedural portraits in pixels
    #[arg(long, default_value_t = makeup_core::datagen::DEFAULT_PORTRAIT_SIZE)]
    pub portrait_size: usize,

    /// Text file with one `image.png geometry.json` pair per line
    #[arg(long)]
    pub portrait_list: Option<PathBuf>,

    /// JSON array of parameter documents used to fit the expert prior
    #[arg(long)]
    pub presets: Option<PathBuf>,

    /// Mixture weight of the uniform component
    #[arg(long, default_value_t = makeup_core::params::DEFAULT_UNIFORM_WEIGHT)]
    pub uniform_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Huber,
    Mse,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,

    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 100)]
    pub epochs: usize,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,

    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,

    /// Share of the dataset held out for validation
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,

    #[arg(long, value_enum, default_value_t = LossArg::Huber)]
    pub loss: LossArg,

    /// Transition width of the huber loss
    #[arg(long, default_value_t = 0.01)]
    pub huber_delta: f64,

    /// Keep the learning rate constant
    #[arg(long)]
    pub no_cosine: bool,

    /// Disable horizontal flip augmentation
    #[arg(long)]
    pub no_flip: bool,

    /// Per-epoch CSV log
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,

    /// Reference photo (PNG)
    #[arg(long)]
    pub image: PathBuf,

    /// Geometry document for the reference photo
    #[arg(long)]
    pub geometry: PathBuf,

    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Also write the crop the model saw
    #[arg(long)]
    pub crop_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Source photo (PNG)
    #[arg(long)]
    pub image: PathBuf,

    /// Geometry document for the source photo
    #[arg(long)]
    pub geometry: PathBuf,

    /// Parameter document
    #[arg(long)]
    pub params: PathBuf,

    /// Output PNG
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub style: RenderStyle,
}

#[derive(Debug, Args)]
pub struct RenderVideoArgs {
    /// Directory of PNG frames, ordered by file name
    #[arg(long)]
    pub frames: PathBuf,

    /// Geometry sequence document keyed by frame number
    #[arg(long)]
    pub geometry: PathBuf,

    /// Parameter document
    #[arg(long)]
    pub params: PathBuf,

    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub style: RenderStyle,
}

#[derive(Debug, Args)]
pub struct EvalTripletsArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Triplet list: `ref.png ref.json src.png src.json truth.png` per line
    #[arg(long)]
    pub list: PathBuf,

    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Report file (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// The validation split train used with the same seed and fraction
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalRecoveryArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,

    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,

    /// Report file (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    NelderMead,
    CoordinateSearch,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Bare source photo; with --geometry and --reference runs a single search
    #[arg(long, requires_all = ["geometry", "reference"])]
    pub source: Option<PathBuf>,

    #[arg(long, requires = "source")]
    pub geometry: Option<PathBuf>,

    /// The made-up version of the source photo
    #[arg(long, requires = "source")]
    pub reference: Option<PathBuf>,

    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Synthetic instances when no photo is given
    #[arg(long, default_value_t = 20)]
    pub instances: usize,

    /// Lowest opacity among synthetic instances
    #[arg(long, default_value_t = 0.3)]
    pub min_opacity: f64,

    /// Side of the synthetic portraits in pixels
    #[arg(long, default_value_t = makeup_core::datagen::DEFAULT_PORTRAIT_SIZE)]
    pub portrait_size: usize,

    #[arg(long, value_enum, default_value_t = MethodArg::NelderMead)]
    pub method: MethodArg,

    /// Objective evaluation budget per search
    #[arg(long, default_value_t = makeup_core::oracle::DEFAULT_MAX_EVALS)]
    pub max_evals: usize,

    /// Report file (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Frame side in pixels
    #[arg(long, default_value_t = 256)]
    pub size: usize,

    #[arg(long, default_value_t = makeup_core::renderer::profile::DEFAULT_WARMUP)]
    pub warmup: usize,

    #[arg(long, default_value_t = makeup_core::renderer::profile::DEFAULT_MEASURED)]
    pub measured: usize,

    /// Distinct procedural frames, cycled
    #[arg(long, default_value_t = 8)]
    pub frames: usize,

    /// Parameter document (default: a glossy red)
    #[arg(long)]
    pub params: Option<PathBuf>,

    #[arg(long, default_value = "lips")]
    pub target: Target,

    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,

    #[arg(long, default_value_t = 8080)]
    pub port: u16,

    /// Requests processed at once; others wait
    #[arg(long, default_value_t = 8)]
    pub max_inflight: usize,
}
