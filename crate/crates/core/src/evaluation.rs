//! Runs a trained network over a split and scores it with the metrics module.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::detection::{cam_probabilities, predict_box_from_cam, predict_point, scaled_tolerance, BoxConfig, BoxPrediction, PointPrediction};
use crate::error::Result;
use crate::metrics::{
    classification_map, corloc, pointloc_map, ApVariant, ClassScores, ClassificationReport, CorLocReport, ImageTruth,
    IouComparison, MetricReport,
};
use crate::network::{label_vector, Network, TrainingSample};
use crate::pyramid::{spp_average_pool, PyramidSpec};
use crate::ClassActivationMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub ap_variant: ApVariant,
    pub boxes: BoxConfig,
    pub iou_threshold: f64,
    pub iou_comparison: IouComparison,
    /// Point-hit tolerance in pixels; scaled from the image size when unset.
    pub tolerance_px: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ap_variant: ApVariant::AllPoint,
            boxes: BoxConfig::default(),
            iou_threshold: 0.5,
            iou_comparison: IouComparison::Strict,
            tolerance_px: None,
        }
    }
}

pub fn cams(net: &Network, samples: &[Sample]) -> Result<Vec<ClassActivationMap>> {
    samples.iter().map(|s| net.forward_cam(&s.to_tensor())).collect()
}

/// Image-level and 2×2 tile-level classification AP.
pub fn classify(net: &Network, samples: &[Sample], options: &EvalOptions) -> Result<ClassificationReport> {
    let spec = PyramidSpec::two_level(net.config().class_count)?;
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(spp_average_pool(&net.forward_cam(&s.to_tensor())?, &spec)?);
        labels.push(label_vector(&TrainingSample::from(s), &spec)?);
    }
    classification_map(&scores, &labels, &spec, options.ap_variant)
}

/// One point per (image, class): the channel maximum of the probability map.
pub fn predict_points(cam: &ClassActivationMap, image_size: (usize, usize)) -> Result<Vec<PointPrediction>> {
    let probs = cam_probabilities(cam);
    (0..cam.classes()).map(|k| predict_point(&probs, k, image_size)).collect()
}

/// Boxes for the classes present in the image.
pub fn predict_boxes(
    cam: &ClassActivationMap,
    classes: &[usize],
    image_size: (usize, usize),
    config: &BoxConfig,
) -> Result<Vec<BoxPrediction>> {
    let mut out = Vec::new();
    for &k in classes {
        if let Some(b) = predict_box_from_cam(cam, k, image_size, config)? {
            out.push(b);
        }
    }
    Ok(out)
}

pub fn pointloc(net: &Network, samples: &[Sample], options: &EvalOptions) -> Result<ClassScores> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    let mut tolerance = options.tolerance_px;
    for s in samples {
        let size = (s.width, s.height);
        tolerance.get_or_insert_with(|| scaled_tolerance(size));
        preds.push(predict_points(&net.forward_cam(&s.to_tensor())?, size)?);
        truth.push(s.truth());
    }
    pointloc_map(
        &preds,
        &truth,
        net.config().class_count,
        tolerance.unwrap_or(0),
        options.ap_variant,
    )
}

pub fn corloc_of(net: &Network, samples: &[Sample], options: &EvalOptions) -> Result<CorLocReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut truth: Vec<ImageTruth> = Vec::with_capacity(samples.len());
    for s in samples {
        let cam = net.forward_cam(&s.to_tensor())?;
        preds.push(predict_boxes(&cam, &s.classes, (s.width, s.height), &options.boxes)?);
        truth.push(s.truth());
    }
    corloc(
        &preds,
        &truth,
        net.config().class_count,
        options.iou_threshold,
        options.iou_comparison,
    )
}

pub fn classification_report(r: &ClassificationReport) -> MetricReport {
    let mut report = MetricReport::default();
    report.push_class_scores("classify_image_ap", &r.image_level.per_class);
    report.push_aggregate("classify_image_ap", "mean", r.image_level.mean());
    for (t, tile) in r.tiles.iter().enumerate() {
        let name = format!("classify_tile{t}_ap");
        report.push_class_scores(&name, &tile.per_class);
        report.push_aggregate(&name, "mean", tile.mean());
    }
    report.push_aggregate("classify_tile_map", "mean", r.tile_mean());
    report
}

pub fn pointloc_report(r: &ClassScores) -> MetricReport {
    let mut report = MetricReport::default();
    report.push_class_scores("pointloc_ap", &r.per_class);
    report.push_aggregate("pointloc_ap", "mean", r.mean());
    report
}

pub fn corloc_report(r: &CorLocReport) -> MetricReport {
    let mut report = MetricReport::default();
    report.push_class_scores("corloc", &r.per_class);
    report.push_aggregate("corloc", "mean", r.mean());
    report.push_aggregate("corloc", "pooled", r.pooled);
    report
}
