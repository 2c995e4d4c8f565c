use std::fmt::Write as _;
use std::io::Write;

use wsod_core::dataset::class_name;
use wsod_core::detection::{cam_probabilities, foreground_mask, predict_box_from_cam, predict_point, BoxConfig, ThresholdDomain};
use wsod_core::pyramid::PyramidSpec;
use wsod_core::ClassActivationMap;

use super::{emit, load_data, load_network, write_file, ExportCamArgs};
use crate::config::ConfigFile;
use crate::{CliError, CliResult};

/// Binary greyscale PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    bytes
}

/// Nearest-cell upsampling of one map channel to image resolution, using
/// the same cell spans as box prediction.
pub fn upsample_channel(map: &ClassActivationMap, class: usize, width: usize, height: usize) -> Vec<f64> {
    let (w, h) = (map.width(), map.height());
    let channel = map.channel(class);
    let mut out = vec![0.0; width * height];
    for row in 0..h {
        for col in 0..w {
            let v = channel[row * w + col];
            for y in PyramidSpec::tile_span(height, h, row) {
                for x in PyramidSpec::tile_span(width, w, col) {
                    out[y * width + x] = v;
                }
            }
        }
    }
    out
}

fn box_config(args: &ExportCamArgs) -> CliResult<BoxConfig> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let eval = file.apply("eval", wsod_core::evaluation::EvalOptions::default())?;
    let mut cfg = eval.boxes;
    if let Some(v) = args.box_threshold {
        cfg.threshold_frac = v;
    }
    if let Some(v) = args.box_domain {
        cfg.domain = v;
    }
    if let Some(v) = args.connectivity {
        cfg.connectivity = v;
    }
    Ok(cfg)
}

pub(crate) fn export_cam(args: &ExportCamArgs, out: &mut dyn Write) -> CliResult<()> {
    let boxes = box_config(args)?;
    let data = load_data(&args.data)?;
    let net = load_network(&args.checkpoint, &data)?;
    let sample = data
        .train
        .iter()
        .chain(&data.eval)
        .find(|s| s.id == args.image_id)
        .ok_or_else(|| CliError::Usage(format!("no image with id `{}` in {}", args.image_id, args.data.display())))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;

    let cam = net.forward_cam(&sample.to_tensor())?;
    let probs = cam_probabilities(&cam);
    let (width, height) = (sample.width, sample.height);
    let threshold_source = match boxes.domain {
        ThresholdDomain::Probability => &probs,
        ThresholdDomain::Activation => &cam,
    };

    let mut sidecar = String::new();
    let _ = writeln!(sidecar, "image={} width={width} height={height}", sample.id);
    let _ = writeln!(sidecar, "cam={}x{}", cam.width(), cam.height());
    let _ = writeln!(sidecar, "present={:?}", sample.classes);
    let _ = writeln!(
        sidecar,
        "box_threshold={} domain={} connectivity={}",
        boxes.threshold_frac, boxes.domain, boxes.connectivity
    );
    let mut written = Vec::new();
    for k in 0..cam.classes() {
        let stem = format!("{}_class{k}_{}", sample.id, class_name(k));
        let prob_pixels: Vec<u8> = upsample_channel(&probs, k, width, height)
            .iter()
            .map(|p| (255.0 * p).round().clamp(0.0, 255.0) as u8)
            .collect();
        let prob_path = args.out_dir.join(format!("{stem}_prob.pgm"));
        write_file(&prob_path, &encode_pgm(width, height, &prob_pixels))?;
        written.push(prob_path);

        let mask_cells: Vec<f64> = match foreground_mask(threshold_source.channel(k), boxes.threshold_frac) {
            Some(mask) => mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            None => vec![0.0; cam.width() * cam.height()],
        };
        let mask_map = ClassActivationMap::from_fn(1, cam.height(), cam.width(), |_, r, c| mask_cells[r * cam.width() + c]);
        let mask_pixels: Vec<u8> = upsample_channel(&mask_map, 0, width, height)
            .iter()
            .map(|&m| if m > 0.5 { 255 } else { 0 })
            .collect();
        let mask_path = args.out_dir.join(format!("{stem}_mask.pgm"));
        write_file(&mask_path, &encode_pgm(width, height, &mask_pixels))?;
        written.push(mask_path);

        let point = predict_point(&probs, k, (width, height))?;
        let _ = write!(
            sidecar,
            "class={k} name={} present={} max_prob={:.6} point=({},{})",
            class_name(k),
            sample.classes.contains(&k),
            point.score,
            point.x,
            point.y
        );
        match predict_box_from_cam(&cam, k, (width, height), &boxes)? {
            Some(b) => {
                let _ = writeln!(
                    sidecar,
                    " box=({},{},{},{})",
                    b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max
                );
            }
            None => sidecar.push_str(" box=none\n"),
        }
    }
    let sidecar_path = args.out_dir.join(format!("{}_cam.txt", sample.id));
    write_file(&sidecar_path, sidecar.as_bytes())?;
    written.push(sidecar_path);

    let mut text = String::new();
    for p in written {
        let _ = writeln!(text, "wrote {}", p.display());
    }
    emit(out, &text)
}
