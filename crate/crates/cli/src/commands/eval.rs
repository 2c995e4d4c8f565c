use std::fmt::Write as _;
use std::io::Write;

use wsod_core::dataset::Sample;
use wsod_core::detection::PredictionRecord;
use wsod_core::evaluation::{
    classification_report, classify, corloc_of, corloc_report, pointloc, pointloc_report, predict_boxes, predict_points,
    EvalOptions,
};
use wsod_core::network::Network;

use super::{emit, load_data, load_network, write_file, EvalArgs, EvalTask};
use crate::config::{echo, sha256_hex, ConfigFile};
use crate::{CliError, CliResult};

pub(crate) fn eval_options(args: &EvalArgs) -> CliResult<EvalOptions> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let mut opts = file.apply("eval", EvalOptions::default())?;
    if let Some(v) = args.ap_variant {
        opts.ap_variant = v;
    }
    if let Some(v) = args.iou_threshold {
        opts.iou_threshold = v;
    }
    if let Some(v) = args.iou_comparison {
        opts.iou_comparison = v;
    }
    if let Some(v) = args.box_threshold {
        opts.boxes.threshold_frac = v;
    }
    if let Some(v) = args.box_domain {
        opts.boxes.domain = v;
    }
    if let Some(v) = args.connectivity {
        opts.boxes.connectivity = v;
    }
    if args.tolerance.is_some() {
        opts.tolerance_px = args.tolerance;
    }
    if !(opts.iou_threshold > 0.0 && opts.iou_threshold <= 1.0) {
        return Err(CliError::Usage(format!("IoU threshold must lie in (0, 1], got {}", opts.iou_threshold)));
    }
    if !(opts.boxes.threshold_frac > 0.0 && opts.boxes.threshold_frac < 1.0) {
        return Err(CliError::Usage(format!(
            "box threshold must lie in (0, 1), got {}",
            opts.boxes.threshold_frac
        )));
    }
    Ok(opts)
}

fn prediction_lines(task: EvalTask, net: &Network, samples: &[Sample], opts: &EvalOptions) -> CliResult<String> {
    let mut text = String::new();
    for s in samples {
        let cam = net.forward_cam(&s.to_tensor())?;
        let size = (s.width, s.height);
        let records: Vec<PredictionRecord> = match task {
            EvalTask::Pointloc => predict_points(&cam, size)?
                .into_iter()
                .map(|prediction| PredictionRecord::Point {
                    image: s.id.clone(),
                    prediction,
                })
                .collect(),
            EvalTask::Corloc => predict_boxes(&cam, &s.classes, size, &opts.boxes)?
                .into_iter()
                .map(|prediction| PredictionRecord::Box {
                    image: s.id.clone(),
                    prediction,
                })
                .collect(),
            EvalTask::Classify => Vec::new(),
        };
        for r in records {
            let _ = writeln!(text, "{r}");
        }
    }
    Ok(text)
}

pub(crate) fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let opts = eval_options(args)?;
    if args.predictions_out.is_some() && args.task == EvalTask::Classify {
        return Err(CliError::Usage("--predictions-out applies to pointloc and corloc only".into()));
    }
    let data = load_data(&args.data)?;
    let ckpt_bytes = std::fs::read(&args.checkpoint).map_err(|e| CliError::io(&args.checkpoint, e))?;
    let net = load_network(&args.checkpoint, &data)?;
    let split = args.split.unwrap_or(args.task.default_split());
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split `{split}` has no images")));
    }

    let report = match args.task {
        EvalTask::Classify => classification_report(&classify(&net, samples, &opts)?),
        EvalTask::Pointloc => pointloc_report(&pointloc(&net, samples, &opts)?),
        EvalTask::Corloc => corloc_report(&corloc_of(&net, samples, &opts)?),
    };

    let mut text = String::new();
    let _ = writeln!(text, "task={}", args.task.name());
    let _ = writeln!(text, "split={split}");
    let _ = writeln!(text, "images={}", samples.len());
    let _ = writeln!(text, "dataset_sha256={}", data.content_sha256.as_deref().unwrap_or("unknown"));
    let _ = writeln!(text, "checkpoint_sha256={}", sha256_hex(&ckpt_bytes));
    let _ = writeln!(text, "options={}", echo(&opts));
    text.push('\n');
    text.push_str(&report.to_table());
    text.push('\n');
    text.push_str(&report.to_records());

    if let Some(path) = &args.report_out {
        write_file(path, text.as_bytes())?;
    }
    if let Some(path) = &args.predictions_out {
        write_file(path, prediction_lines(args.task, &net, samples, &opts)?.as_bytes())?;
    }
    emit(out, &text)
}
