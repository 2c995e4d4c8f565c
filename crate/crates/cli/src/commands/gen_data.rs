use std::io::Write;

use wsod_core::dataset::{generate_dataset, BiasPreset, DatasetConfig};
use wsod_core::embedding::format_matrix;

use super::{emit, GenDataArgs};
use crate::config::ConfigFile;
use crate::CliResult;

pub(crate) fn resolve_config(args: &GenDataArgs) -> CliResult<DatasetConfig> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let base = DatasetConfig::with_preset(
        args.classes.unwrap_or(4),
        args.bias_preset.unwrap_or(BiasPreset::Uniform),
    );
    let mut cfg = file.apply("dataset", base)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.images {
        cfg.train_images = (n * 3).div_ceil(4);
        cfg.eval_images = n - cfg.train_images;
    }
    if let Some(n) = args.train_images {
        cfg.train_images = n;
    }
    if let Some(n) = args.eval_images {
        cfg.eval_images = n;
    }
    if let Some(side) = args.size {
        cfg.width = side;
        cfg.height = side;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn gen_data(args: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve_config(args)?;
    log::info!("generating {} + {} images", cfg.train_images, cfg.eval_images);
    let manifest = generate_dataset(&cfg, &args.out)?;
    let mut text = format!(
        "images: train={} eval={}\nsize: {}x{}\nclasses: {}\nseed: {}\ncontent_sha256: {}\n",
        cfg.train_images, cfg.eval_images, cfg.width, cfg.height, cfg.class_count, cfg.seed, manifest.content_sha256
    );
    text.push_str("train PPMI:\n");
    text.push_str(&format_matrix(&manifest.train_ppmi, 4));
    emit(out, &text)
}
