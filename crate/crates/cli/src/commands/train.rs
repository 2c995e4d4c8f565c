use std::fs::File;
use std::io::{BufWriter, Write};

use serde::Serialize;
use wsod_core::dataset::Dataset;
use wsod_core::network::{
    fit_label_embedding, train as run_training, AugmentationConfig, LossMode, Network, NetworkConfig, TrainingConfig,
};

use super::{emit, load_data, TrainArgs};
use crate::config::{echo, sha256_hex, ConfigFile};
use crate::{embedding_path, loss_log_path, CliError, CliResult};

/// Everything that determines a training run, echoed into the loss log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub(crate) struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub dataset_sha256: Option<String>,
    pub warm_start_sha256: Option<String>,
}

fn network_config(args: &TrainArgs, file: &ConfigFile, data: &Dataset) -> CliResult<NetworkConfig> {
    let mut cfg = NetworkConfig::new(data.class_count);
    if let Some(s) = data.train.first() {
        cfg.input_width = s.width;
        cfg.input_height = s.height;
    }
    let mut cfg = file.apply("network", cfg)?;
    if let Some(w) = &args.block_widths {
        cfg.block_widths = w.clone();
    }
    if let Some(h) = args.head_width {
        cfg.head_width = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn training_config(args: &TrainArgs, file: &ConfigFile) -> CliResult<TrainingConfig> {
    let base = if args.paper_schedule {
        TrainingConfig::paper()
    } else {
        TrainingConfig::default()
    };
    let mut cfg = file.apply("training", base)?;
    macro_rules! set {
        ($flag:expr => $($field:ident).+) => {
            if let Some(v) = $flag {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(args.loss => loss);
    set!(args.labels => labels);
    set!(args.iters => iterations);
    set!(args.seed => seed);
    set!(args.batch_size => batch_size);
    set!(args.lr_initial => schedule.initial);
    set!(args.lr_after => schedule.after);
    set!(args.warmup_iters => schedule.warmup_iters);
    set!(args.momentum => momentum);
    if args.no_augment {
        cfg.augmentation = AugmentationConfig::disabled();
    }
    // Short runs keep the warm-up rate throughout unless a warm-up length was asked for.
    let explicit_warmup = args.warmup_iters.is_some() || file.sets("training", &["schedule", "warmup_iters"]);
    if !explicit_warmup && cfg.schedule.warmup_iters > cfg.iterations {
        cfg.schedule.warmup_iters = cfg.iterations;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let data = load_data(&args.data)?;
    let training = training_config(args, &file)?;

    let (mut net, warm_start_sha256) = match &args.warm_start {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let net = Network::from_checkpoint_bytes(&bytes, path)?;
            let requested = network_config(args, &file, &data)?;
            if *net.config() != requested {
                return Err(CliError::Usage(format!(
                    "warm-start checkpoint {} has architecture {}, requested {}",
                    path.display(),
                    echo(net.config()),
                    echo(&requested)
                )));
            }
            (net, Some(sha256_hex(&bytes)))
        }
        None => {
            let cfg = network_config(args, &file, &data)?;
            (Network::build(cfg, training.seed)?, None)
        }
    };

    let run = RunConfig {
        network: net.config().clone(),
        training: training.clone(),
        dataset_sha256: data.content_sha256.clone(),
        warm_start_sha256,
    };
    let run_json = echo(&run);
    let run_sha = sha256_hex(run_json.as_bytes());

    let embedding = match training.loss {
        LossMode::CosinePpmi => {
            let spec = training.labels.spec(data.class_count)?;
            let model = fit_label_embedding(&data.train, &spec)?;
            model.save(&embedding_path(&args.checkpoint_out))?;
            Some(model)
        }
        LossMode::Logistic => None,
    };

    let log_path = loss_log_path(&args.checkpoint_out);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    writeln!(log_file, "# config={run_json}\n# config_sha256={run_sha}").map_err(|e| CliError::io(&log_path, e))?;
    let mut write_error = None;
    let every = (training.iterations / 20).max(1);
    let outcome = run_training(&mut net, &data.train, &training, embedding.as_ref(), |record| {
        if write_error.is_none() {
            if let Err(e) = writeln!(log_file, "{record}") {
                write_error = Some(e);
            }
        }
        if record.iteration % every == 0 || record.iteration + 1 == training.iterations {
            log::info!("{record}");
        }
    })?;
    if let Some(e) = write_error {
        return Err(CliError::io(&log_path, e));
    }
    log_file.flush().map_err(|e| CliError::io(&log_path, e))?;

    let bytes = net.to_checkpoint_bytes();
    super::write_file(&args.checkpoint_out, &bytes)?;

    let tail: Vec<f64> = outcome.losses.iter().rev().take(10).copied().filter(|l| l.is_finite()).collect();
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    emit(
        out,
        &format!(
            "loss={} labels={} iterations={} batch={}\nfinal_loss={final_loss:.6} skipped_samples={}\nconfig_sha256={run_sha}\ncheckpoint_sha256={}\n",
            training.loss,
            training.labels,
            training.iterations,
            training.batch_size,
            outcome.skipped_samples,
            sha256_hex(&bytes)
        ),
    )
}
