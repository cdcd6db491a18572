use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nanolens::optim::OptimizerKind;
use nanolens::train::Regime;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "nanolens", version, about = "Train small CNNs on micrographs and look inside them")]
pub struct Cli {
    /// Read `key=value` defaults from FILE; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the convolutional autoencoder on an image directory.
    TrainCae(TrainCaeArgs),
    /// Train the classifier under one of the regimes a1, a2 or a3.
    TrainCls(TrainClsArgs),
    /// Pretrain a transfer base on the oriented-grating task.
    MakeSurrogate(SurrogateArgs),
    /// Write a procedurally generated corpus as class directories of PNGs.
    MakeCorpus(CorpusArgs),
    /// Render feature maps of one image at one or more depths.
    Lens(LensArgs),
    /// Synthesize filter-maximizing inputs for a conv layer.
    Filters(FiltersArgs),
    /// Serve the HTTP API and, optionally, the explorer UI.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainCae(_) => "train-cae",
            Command::TrainCls(_) => "train-cls",
            Command::MakeSurrogate(_) => "make-surrogate",
            Command::MakeCorpus(_) => "make-corpus",
            Command::Lens(_) => "lens",
            Command::Filters(_) => "filters",
            Command::Serve(_) => "serve",
        }
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: nanolens::Error| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: nanolens::Error| e.to_string())
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainingFlags {
    /// Square side length images are resized to.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of images used for training; the rest validates.
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainCaeArgs {
    /// Corpus root with one subdirectory per class.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainingFlags,
    /// Encoder channels per stage, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,8,8")]
    pub channels: Vec<usize>,
    #[arg(long, default_value = "runs/cae")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainClsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "a3", value_parser = parse_regime)]
    pub regime: Regime,
    /// Transfer base checkpoint; required for a1 and a2.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainingFlags,
    /// Conv channels per stage; taken from the base when omitted.
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value = "runs/cls")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SurrogateArgs {
    #[command(flatten)]
    pub train: TrainingFlags,
    #[arg(long, default_value_t = 24)]
    pub per_class: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub conv_channels: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value = "runs/surrogate")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Dot lattices and vertical stripes, two classes.
    StripesDots,
    /// Gratings at four orientations and two periods, eight classes.
    Gratings,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CorpusArgs {
    #[arg(long, value_enum, default_value = "stripes-dots")]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LensArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Number of leading layers to run; repeat for several grids.
    #[arg(long, required = true)]
    pub depth: Vec<usize>,
    #[arg(long, default_value = "runs/lens")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FiltersArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Zero-based index of a conv layer.
    #[arg(long)]
    pub layer: usize,
    /// One filter; the whole layer is rendered as an atlas when omitted.
    #[arg(long)]
    pub filter: Option<usize>,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Halvings tried when a step lowers the objective; 0 disables.
    #[arg(long, default_value_t = 20)]
    pub max_backtracks: usize,
    /// Let pixels leave [0, 1].
    #[arg(long)]
    pub no_clamp: bool,
    #[arg(long, default_value = "runs/filters")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Built explorer UI assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Uploaded images and rendered artifacts.
    #[arg(long, default_value = "nanolens-data")]
    pub data_dir: PathBuf,
    /// Concurrent filter jobs; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = nanolens_service::DEFAULT_MAX_UPLOAD)]
    pub max_upload_bytes: usize,
}
