//! Average precision and the classification, point-localization and CorLoc
//! evaluation protocols.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, point_hit, BBox, BoxPrediction, PointPrediction};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::pyramid::{PyramidLabelVector, PyramidSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApVariant {
    /// Mean of the precision at the rank of every retrieved positive.
    #[default]
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// All-point average precision. `None` when there are no positives.
pub fn average_precision(scored: &[(f64, bool)], positive_count: usize) -> Option<f64> {
    average_precision_with(scored, positive_count, ApVariant::AllPoint)
}

/// Ranks by descending score; equal scores keep their input order.
pub fn average_precision_with(scored: &[(f64, bool)], positive_count: usize, variant: ApVariant) -> Option<f64> {
    if positive_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            hits += 1;
        }
        curve.push((hits as f64 / positive_count as f64, hits as f64 / (rank + 1) as f64, scored[i].1));
    }
    let ap = match variant {
        ApVariant::AllPoint => {
            // an empty f64 sum is -0.0
            curve.iter().filter(|c| c.2).map(|c| c.1).fold(0.0, |a, b| a + b) / positive_count as f64
        }
        ApVariant::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let recall = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|c| c.0 >= recall - 1e-12)
                        .map(|c| c.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap)
}

/// Per-class AP with the mean over classes whose AP is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
}

impl ClassScores {
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub image_level: ClassScores,
    /// One entry per tile of the finest pyramid level, row-major.
    pub tiles: Vec<ClassScores>,
}

impl ClassificationReport {
    /// Class-mean AP of every tile, then averaged over tiles.
    pub fn tile_mean(&self) -> Option<f64> {
        let means: Vec<f64> = self.tiles.iter().filter_map(ClassScores::mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

fn positives(scored: &[(f64, bool)]) -> usize {
    scored.iter().filter(|s| s.1).count()
}

/// Classification AP from pooled (pre-sigmoid) scores and pyramid labels.
/// Image-level units are whole images; for the finest level with more than
/// one tile, every tile is ranked independently across images.
pub fn classification_map(
    pooled_scores: &[Vec<f64>],
    labels: &[PyramidLabelVector],
    spec: &PyramidSpec,
    variant: ApVariant,
) -> Result<ClassificationReport> {
    if pooled_scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: pooled_scores.len(),
            actual: labels.len(),
        });
    }
    for (s, l) in pooled_scores.iter().zip(labels) {
        if s.len() != spec.total_dim() || l.spec() != spec {
            return Err(Error::DimensionMismatch {
                expected: spec.total_dim(),
                actual: s.len(),
            });
        }
    }
    let c = spec.class_count();
    let rank_entry = |index: usize| -> Option<f64> {
        let scored: Vec<(f64, bool)> = pooled_scores
            .iter()
            .zip(labels)
            .map(|(s, l)| (sigmoid(s[index]), l.bits()[index]))
            .collect();
        average_precision_with(&scored, positives(&scored), variant)
    };

    let image_level = ClassScores {
        per_class: (0..c).map(|k| rank_entry(spec.index(0, 0, 0, k))).collect(),
    };
    let finest = spec.levels().len() - 1;
    let l = spec.max_level();
    let tiles = if l > 1 {
        (0..l * l)
            .map(|t| ClassScores {
                per_class: (0..c).map(|k| rank_entry(spec.index(finest, t / l, t % l, k))).collect(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ClassificationReport { image_level, tiles })
}

/// Ground-truth boxes of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTruth {
    pub boxes: Vec<(usize, BBox)>,
}

impl ImageTruth {
    pub fn contains_class(&self, class: usize) -> bool {
        self.boxes.iter().any(|(k, _)| *k == class)
    }

    pub fn boxes_of(&self, class: usize) -> Vec<BBox> {
        self.boxes.iter().filter(|(k, _)| *k == class).map(|(_, b)| *b).collect()
    }
}

/// Point-localization AP: per class, every image's point for that class is
/// ranked by score and counts as positive iff it hits a box of the class.
pub fn pointloc_map(
    predictions: &[Vec<PointPrediction>],
    truth: &[ImageTruth],
    class_count: usize,
    tolerance_px: usize,
    variant: ApVariant,
) -> Result<ClassScores> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predictions.len(),
        });
    }
    let per_class = (0..class_count)
        .map(|k| {
            let scored: Vec<(f64, bool)> = predictions
                .iter()
                .zip(truth)
                .flat_map(|(preds, t)| {
                    preds
                        .iter()
                        .filter(move |p| p.class == k)
                        .map(move |p| (p.score, point_hit(p, &t.boxes_of(k), tolerance_px)))
                })
                .collect();
            let positive_count = truth.iter().filter(|t| t.contains_class(k)).count();
            average_precision_with(&scored, positive_count, variant)
        })
        .collect();
    Ok(ClassScores { per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouComparison {
    /// IoU must exceed the threshold.
    #[default]
    Strict,
    /// IoU equal to the threshold also counts.
    Inclusive,
}

impl IouComparison {
    pub fn passes(self, value: f64, threshold: f64) -> bool {
        match self {
            IouComparison::Strict => value > threshold,
            IouComparison::Inclusive => value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorLocReport {
    pub per_class: Vec<Option<f64>>,
    /// Fraction over all evaluated (image, class) pairs.
    pub pooled: Option<f64>,
}

impl CorLocReport {
    pub fn mean(&self) -> Option<f64> {
        ClassScores {
            per_class: self.per_class.clone(),
        }
        .mean()
    }
}

/// Correct-localization rate over (image, present class) pairs. `predictions`
/// holds at most one box per class per image.
pub fn corloc(
    predictions: &[Vec<BoxPrediction>],
    truth: &[ImageTruth],
    class_count: usize,
    iou_threshold: f64,
    comparison: IouComparison,
) -> Result<CorLocReport> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predictions.len(),
        });
    }
    let mut correct = vec![0usize; class_count];
    let mut total = vec![0usize; class_count];
    for (preds, t) in predictions.iter().zip(truth) {
        for k in 0..class_count {
            let gt = t.boxes_of(k);
            if gt.is_empty() {
                continue;
            }
            total[k] += 1;
            let hit = preds
                .iter()
                .find(|p| p.class == k)
                .is_some_and(|p| gt.iter().any(|g| comparison.passes(iou(&p.bbox, g), iou_threshold)));
            if hit {
                correct[k] += 1;
            }
        }
    }
    let per_class = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let all: usize = total.iter().sum();
    let pooled = (all > 0).then(|| correct.iter().sum::<usize>() as f64 / all as f64);
    Ok(CorLocReport { per_class, pooled })
}

/// One reported number; `class == None` marks an aggregate row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub class: Option<usize>,
    pub aggregate: &'static str,
    pub value: Option<f64>,
}

/// Metric rows rendered as an aligned table or as `metric= class= value=` records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push_class_scores(&mut self, metric: &str, scores: &[Option<f64>]) {
        for (k, v) in scores.iter().enumerate() {
            self.rows.push(MetricRow {
                metric: metric.to_string(),
                class: Some(k),
                aggregate: "",
                value: *v,
            });
        }
    }

    pub fn push_aggregate(&mut self, metric: &str, aggregate: &'static str, value: Option<f64>) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            class: None,
            aggregate,
            value,
        });
    }

    pub fn get(&self, metric: &str, aggregate: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.class.is_none() && r.aggregate == aggregate)
            .and_then(|r| r.value)
    }

    fn fmt_value(v: Option<f64>) -> String {
        v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
    }

    fn class_label(row: &MetricRow) -> String {
        row.class.map_or_else(|| row.aggregate.to_string(), |k| k.to_string())
    }

    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "metric={} class={} value={}",
                r.metric,
                Self::class_label(r),
                Self::fmt_value(r.value)
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let metric_w = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<metric_w$}  {:>7}  {:>9}\n", "metric", "class", "value");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<metric_w$}  {:>7}  {:>9}",
                r.metric,
                Self::class_label(r),
                Self::fmt_value(r.value)
            );
        }
        out
    }
}
