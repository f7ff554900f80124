mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sortseg::dataio::{ClassLabel, Layout};
use sortseg::evalreport::{IouMode, Split, Stage};
use sortseg::pipeline::{StageName, OUTPUT_ROOT_ENV};
use sortseg::refine::{Leftover, Provider};
use sortseg::saliency::{CamMethod, LayerSelector, Threshold};

/// Weakly supervised segmentation of removed items from before/after
/// conveyor imagery.
#[derive(Parser, Debug)]
#[command(name = "sortseg", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Keep per-frame outputs of interrupted stages.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Last pipeline stage to run.
    #[arg(long, global = true, value_parser = parse_stage_name)]
    pub until: Option<StageName>,
    /// Dataset directory layout.
    #[arg(long, global = true, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    /// Root for pipeline stage directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output: Option<PathBuf>,
    /// Pipeline config file (TOML) whose sections seed the stage options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Debug logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic before/after dataset.
    Generate(GenerateArgs),
    /// Scan a dataset and print its statistics.
    Ingest(IngestArgs),
    /// Build the three-class background-removed training tree.
    Bgremove(BgremoveArgs),
    /// Train the auxiliary before/after(/background) classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Saliency maps and coarse masks for the before class.
    Cam(CamArgs),
    /// Refine coarse masks with instance masks.
    Refine(RefineArgs),
    /// Train the segmenter on refined pseudo-masks.
    TrainSeg(TrainSegArgs),
    /// Segment frames with a trained segmenter.
    Segment(SegmentArgs),
    /// Score mask trees against ground truth, or rank saved reports.
    Eval(EvalArgs),
    /// Run every stage from one config file.
    Pipeline,
    /// Run the acceptance criteria.
    Acceptance(AcceptanceArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub frames_per_sequence: Option<usize>,
    /// Wanted and unwanted objects differ only by shape.
    #[arg(long)]
    pub hard_mode: bool,
    /// Render both cameras under identical lighting.
    #[arg(long)]
    pub no_lighting_bias: bool,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Also write the statistics as a key-value manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BgremoveArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Defaults to `<root>-br`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dev_thresh: Option<f32>,
    #[arg(long)]
    pub sat_thresh: Option<f32>,
    #[arg(long)]
    pub min_blob: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    /// Dataset root, either raw or background-removed.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; curves are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the number of classes found in the dataset.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub puzzle: bool,
    #[arg(long)]
    pub temporal: bool,
    /// Disable colour jitter.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct CamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_cam_method)]
    pub method: Option<CamMethod>,
    #[arg(long, value_parser = parse_class)]
    pub target: Option<ClassLabel>,
    /// Fixed threshold in (0, 1) or `otsu`.
    #[arg(long, value_parser = parse_threshold)]
    pub tau: Option<Threshold>,
    /// `last` or a feature-layer index.
    #[arg(long, value_parser = parse_layer)]
    pub layer: Option<LayerSelector>,
    /// Every frame instead of the before training pool plus the test split.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub no_maps: bool,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub coarse: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_provider)]
    pub provider: Option<Provider>,
    #[arg(long)]
    pub overlap_tau: Option<f64>,
    #[arg(long, value_parser = parse_leftover)]
    pub leftover: Option<Leftover>,
    #[arg(long)]
    pub no_fill_holes: bool,
    /// Program and leading arguments for the external provider.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    pub external_command: Option<Vec<String>>,
    #[arg(long)]
    pub all: bool,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Mask tree mirroring the dataset (refined masks).
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Every frame instead of the test split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "compare")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    #[arg(long)]
    pub refined: Option<PathBuf>,
    #[arg(long)]
    pub segmented: Option<PathBuf>,
    /// Root holding saliency maps for the panels.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_eval_stage)]
    pub stages: Option<Vec<Stage>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_split)]
    pub splits: Option<Vec<Split>>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<IouMode>,
    #[arg(long)]
    pub panels: Option<usize>,
    /// Method label stored in the report.
    #[arg(long)]
    pub method: Option<String>,
    /// Report directories to rank against each other.
    #[arg(long, num_args = 2.., conflicts_with_all = ["data", "out"])]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
pub struct AcceptanceArgs {
    /// `fast` or `full_synthetic`.
    #[arg(long, default_value = "fast", value_parser = parse_profile)]
    pub profile: sortseg::acceptance::Profile,
    /// Work directory for training-based criteria; defaults to
    /// `<output>/acceptance`.
    #[arg(long)]
    pub work: Option<PathBuf>,
}

fn parse_stage_name(s: &str) -> Result<StageName, String> {
    StageName::parse(s).map_err(|e| e.to_string())
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s {
        "canonical" => Ok(Layout::Canonical),
        "zenodo" => Ok(Layout::Zenodo),
        other => Err(format!("unknown layout `{other}`")),
    }
}

fn parse_cam_method(s: &str) -> Result<CamMethod, String> {
    CamMethod::parse(s).map_err(|e| e.to_string())
}

fn parse_class(s: &str) -> Result<ClassLabel, String> {
    ClassLabel::parse(s).ok_or_else(|| format!("unknown class `{s}`"))
}

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    if s == "otsu" {
        return Ok(Threshold::Otsu);
    }
    let t: f32 = s.parse().map_err(|_| format!("threshold must be a number or `otsu`, got `{s}`"))?;
    let th = Threshold::Fixed(t);
    th.validate().map_err(|e| e.to_string())?;
    Ok(th)
}

fn parse_layer(s: &str) -> Result<LayerSelector, String> {
    match s {
        "last" | "last_conv" => Ok(LayerSelector::LastConv),
        n => n.parse().map(LayerSelector::Index).map_err(|_| format!("layer must be `last` or an index, got `{n}`")),
    }
}

fn parse_provider(s: &str) -> Result<Provider, String> {
    Provider::parse(s).map_err(|e| e.to_string())
}

fn parse_leftover(s: &str) -> Result<Leftover, String> {
    match s {
        "drop" => Ok(Leftover::Drop),
        "keep" => Ok(Leftover::Keep),
        other => Err(format!("leftover policy must be drop or keep, got `{other}`")),
    }
}

fn parse_eval_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<IouMode, String> {
    IouMode::parse(s).map_err(|e| e.to_string())
}

fn parse_profile(s: &str) -> Result<sortseg::acceptance::Profile, String> {
    sortseg::acceptance::Profile::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
