use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use wsod_core::dataset::{load_dataset, BiasPreset, Dataset, Split};
use wsod_core::detection::{Connectivity, ThresholdDomain};
use wsod_core::metrics::{ApVariant, IouComparison};
use wsod_core::network::{LabelMode, LossMode, Network};

use crate::{CliError, CliResult};

mod eval;
mod export_cam;
mod gen_data;
mod inspect;
mod train;

pub(crate) use eval::eval;
pub(crate) use export_cam::export_cam;
pub(crate) use gen_data::gen_data;
pub(crate) use inspect::inspect_embedding;
pub(crate) use train::train;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total image count, split 3:1 into train and eval.
    #[arg(long, conflicts_with_all = ["train_images", "eval_images"])]
    pub images: Option<usize>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub eval_images: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_parser = parse_bias_preset)]
    pub bias_preset: Option<BiasPreset>,
    /// Side length of the square images.
    #[arg(long)]
    pub size: Option<usize>,
    /// TOML file with a `[dataset]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossMode>,
    #[arg(long, value_parser = parse_labels)]
    pub labels: Option<LabelMode>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    /// Initialize from an existing checkpoint instead of random weights.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_after: Option<f64>,
    #[arg(long)]
    pub warmup_iters: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Batch 256 for 2000 iterations.
    #[arg(long)]
    pub paper_schedule: bool,
    /// Disable every augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Channel widths of the convolution blocks, e.g. `16,32,64`.
    #[arg(long, value_delimiter = ',')]
    pub block_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub head_width: Option<usize>,
    /// TOML file with `[network]` and `[training]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Classify,
    Pointloc,
    Corloc,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Classify => "classify",
            EvalTask::Pointloc => "pointloc",
            EvalTask::Corloc => "corloc",
        }
    }

    /// CorLoc is measured on the images the network was trained on.
    pub fn default_split(self) -> Split {
        match self {
            EvalTask::Corloc => Split::Train,
            _ => Split::Eval,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Also write the report to this file.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Dump per-image predictions as line records.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, value_parser = parse_ap_variant)]
    pub ap_variant: Option<ApVariant>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long, value_parser = parse_iou_comparison)]
    pub iou_comparison: Option<IouComparison>,
    #[arg(long)]
    pub box_threshold: Option<f64>,
    #[arg(long, value_parser = parse_domain)]
    pub box_domain: Option<ThresholdDomain>,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
    /// Point-hit tolerance in pixels.
    #[arg(long)]
    pub tolerance: Option<usize>,
    /// TOML file with an `[eval]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportCamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub box_threshold: Option<f64>,
    #[arg(long, value_parser = parse_domain)]
    pub box_domain: Option<ThresholdDomain>,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_labels, default_value = "image")]
    pub labels: LabelMode,
    #[arg(long, value_parser = parse_split, default_value = "train")]
    pub split: Split,
}

fn parse_bias_preset(s: &str) -> Result<BiasPreset, String> {
    s.parse().map_err(|e: wsod_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: wsod_core::Error| e.to_string())
}

fn parse_labels(s: &str) -> Result<LabelMode, String> {
    s.parse().map_err(|e: wsod_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: wsod_core::Error| e.to_string())
}

fn parse_ap_variant(s: &str) -> Result<ApVariant, String> {
    match s {
        "all-point" => Ok(ApVariant::AllPoint),
        "eleven-point" => Ok(ApVariant::ElevenPoint),
        _ => Err(format!("unknown AP variant `{s}` (expected all-point or eleven-point)")),
    }
}

fn parse_iou_comparison(s: &str) -> Result<IouComparison, String> {
    match s {
        "strict" => Ok(IouComparison::Strict),
        "inclusive" => Ok(IouComparison::Inclusive),
        _ => Err(format!("unknown IoU comparison `{s}` (expected strict or inclusive)")),
    }
}

fn parse_domain(s: &str) -> Result<ThresholdDomain, String> {
    match s {
        "probability" => Ok(ThresholdDomain::Probability),
        "activation" => Ok(ThresholdDomain::Activation),
        _ => Err(format!("unknown threshold domain `{s}` (expected probability or activation)")),
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    match s {
        "4" | "four" => Ok(Connectivity::Four),
        "8" | "eight" => Ok(Connectivity::Eight),
        _ => Err(format!("unknown connectivity `{s}` (expected 4 or 8)")),
    }
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn load_data(path: &Path) -> CliResult<Dataset> {
    log::info!("loading dataset from {}", path.display());
    Ok(load_dataset(path)?)
}

/// Loads a checkpoint and checks it fits the dataset's images and classes.
pub(crate) fn load_network(path: &Path, data: &Dataset) -> CliResult<Network> {
    let net = Network::load(path)?;
    let cfg = net.config();
    if cfg.class_count != data.class_count {
        return Err(CliError::Usage(format!(
            "checkpoint {} predicts {} classes, dataset has {}",
            path.display(),
            cfg.class_count,
            data.class_count
        )));
    }
    if let Some(s) = data.train.first().or(data.eval.first()) {
        if (s.width, s.height) != (cfg.input_width, cfg.input_height) {
            return Err(CliError::Usage(format!(
                "checkpoint expects {}x{} images, dataset has {}x{}",
                cfg.input_width, cfg.input_height, s.width, s.height
            )));
        }
    }
    Ok(net)
}
