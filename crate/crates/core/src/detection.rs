//! Reading point and box predictions off class activation maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::ClassActivationMap;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// Point tolerance at the 512 px reference scale.
pub const REFERENCE_TOLERANCE_PX: usize = 18;
pub const REFERENCE_IMAGE_SIDE: usize = 512;
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.10;

/// Pixel box, inclusive on the min edges and exclusive on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Config(format!(
                "empty box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }
}

/// Intersection over union under pixel-area semantics.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrediction {
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// `true` iff the point falls inside one of the boxes grown by `tolerance_px`
/// on every side.
pub fn point_hit(p: &PointPrediction, gt_boxes: &[BBox], tolerance_px: usize) -> bool {
    let (x, y, t) = (p.x as i64, p.y as i64, tolerance_px as i64);
    gt_boxes.iter().any(|b| {
        x >= b.x_min as i64 - t && x < b.x_max as i64 + t && y >= b.y_min as i64 - t && y < b.y_max as i64 + t
    })
}

/// Tolerance scaled linearly from the 18 px / 512 px reference to the
/// shorter image side.
pub fn scaled_tolerance(image_size: (usize, usize)) -> usize {
    let side = image_size.0.min(image_size.1) as f64;
    (REFERENCE_TOLERANCE_PX as f64 * side / REFERENCE_IMAGE_SIDE as f64).round() as usize
}

/// Elementwise sigmoid of every channel.
pub fn cam_probabilities(cam: &ClassActivationMap) -> ClassActivationMap {
    cam.map(sigmoid)
}

fn check_class(map: &ClassActivationMap, class: usize) -> Result<()> {
    if class >= map.classes() {
        return Err(Error::ClassOutOfRange {
            class,
            class_count: map.classes(),
        });
    }
    Ok(())
}

/// Index of the first maximum in row-major order.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Maximum of one channel, mapped to the image through the centre of its cell.
pub fn predict_point(prob_map: &ClassActivationMap, class: usize, image_size: (usize, usize)) -> Result<PointPrediction> {
    check_class(prob_map, class)?;
    let (w, h) = (prob_map.width(), prob_map.height());
    let (img_w, img_h) = image_size;
    let channel = prob_map.channel(class);
    let best = argmax(channel);
    let (i, j) = (best / w, best % w);
    Ok(PointPrediction {
        class,
        x: ((2 * j + 1) * img_w) / (2 * w),
        y: ((2 * i + 1) * img_h) / (2 * h),
        score: channel[best],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "four",
            Connectivity::Eight => "eight",
        })
    }
}

/// Which values the foreground threshold is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdDomain {
    /// Post-sigmoid probabilities.
    #[default]
    Probability,
    /// Raw pre-sigmoid activations.
    Activation,
}

impl fmt::Display for ThresholdDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdDomain::Probability => "probability",
            ThresholdDomain::Activation => "activation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxConfig {
    pub threshold_frac: f64,
    pub connectivity: Connectivity,
    pub domain: ThresholdDomain,
}

impl Default for BoxConfig {
    fn default() -> Self {
        BoxConfig {
            threshold_frac: DEFAULT_BOX_THRESHOLD,
            connectivity: Connectivity::Four,
            domain: ThresholdDomain::Probability,
        }
    }
}

/// One connected foreground region in a row-major grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub size: usize,
    /// Row-major index of the first pixel of the component.
    pub first_index: usize,
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // keep the smaller index as root so roots are the first pixel in raster order
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Connected components of a row-major mask, ordered by first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize, connectivity: Connectivity) -> Vec<Component> {
    assert_eq!(mask.len(), height * width);
    let mut sets = DisjointSets::new(mask.len());
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !mask[i] {
                continue;
            }
            if c > 0 && mask[i - 1] {
                sets.union(i, i - 1);
            }
            if r > 0 {
                if mask[i - width] {
                    sets.union(i, i - width);
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && mask[i - width - 1] {
                        sets.union(i, i - width - 1);
                    }
                    if c + 1 < width && mask[i - width + 1] {
                        sets.union(i, i - width + 1);
                    }
                }
            }
        }
    }

    let mut slot = vec![usize::MAX; mask.len()];
    let mut components: Vec<Component> = Vec::new();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let root = sets.find(i);
        let (r, c) = (i / width, i % width);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Component {
                size: 0,
                first_index: i,
                min_row: r,
                max_row: r,
                min_col: c,
                max_col: c,
            });
        }
        let comp = &mut components[slot[root]];
        comp.size += 1;
        comp.min_row = comp.min_row.min(r);
        comp.max_row = comp.max_row.max(r);
        comp.min_col = comp.min_col.min(c);
        comp.max_col = comp.max_col.max(c);
    }
    components
}

/// Largest component; ties go to the one whose first pixel comes first.
pub fn largest_component(components: &[Component]) -> Option<&Component> {
    components
        .iter()
        .fold(None, |best: Option<&Component>, c| match best {
            Some(b) if b.size >= c.size => Some(b),
            _ => Some(c),
        })
}

/// Pixels strictly above `threshold_frac` times the channel maximum.
pub fn foreground_mask(channel: &[f64], threshold_frac: f64) -> Option<Vec<bool>> {
    let max = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let cut = threshold_frac * max;
    Some(channel.iter().map(|&v| v > cut).collect())
}

/// Box around the largest connected region of a thresholded channel, scaled
/// from map cells to the image pixels they span.
pub fn predict_box(
    map: &ClassActivationMap,
    class: usize,
    image_size: (usize, usize),
    threshold_frac: f64,
) -> Result<Option<BoxPrediction>> {
    predict_box_with(
        map,
        class,
        image_size,
        &BoxConfig {
            threshold_frac,
            ..BoxConfig::default()
        },
    )
}

/// [`predict_box`] with explicit connectivity; `map` is thresholded as given.
pub fn predict_box_with(
    map: &ClassActivationMap,
    class: usize,
    image_size: (usize, usize),
    config: &BoxConfig,
) -> Result<Option<BoxPrediction>> {
    check_class(map, class)?;
    if !(config.threshold_frac > 0.0 && config.threshold_frac < 1.0) {
        return Err(Error::Config(format!(
            "threshold fraction must lie in (0, 1), got {}",
            config.threshold_frac
        )));
    }
    let (h, w) = (map.height(), map.width());
    let channel = map.channel(class);
    let Some(mask) = foreground_mask(channel, config.threshold_frac) else {
        return Ok(None);
    };
    let components = connected_components(&mask, h, w, config.connectivity);
    let Some(best) = largest_component(&components) else {
        return Ok(None);
    };
    let (img_w, img_h) = image_size;
    let bbox = BBox::new(
        best.min_col * img_w / w,
        best.min_row * img_h / h,
        (best.max_col + 1) * img_w / w,
        (best.max_row + 1) * img_h / h,
    )?;
    let score = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(BoxPrediction { class, bbox, score }))
}

/// Box prediction from a raw activation map, thresholding in the configured domain.
/// The reported score is always the channel's maximum probability.
pub fn predict_box_from_cam(
    cam: &ClassActivationMap,
    class: usize,
    image_size: (usize, usize),
    config: &BoxConfig,
) -> Result<Option<BoxPrediction>> {
    let probs = cam_probabilities(cam);
    let source = match config.domain {
        ThresholdDomain::Probability => &probs,
        ThresholdDomain::Activation => cam,
    };
    let pred = predict_box_with(source, class, image_size, config)?;
    let score = probs.channel(class).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(pred.map(|p| BoxPrediction { score, ..p }))
}

/// A line of the prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionRecord {
    Point { image: String, prediction: PointPrediction },
    Box { image: String, prediction: BoxPrediction },
}

impl fmt::Display for PredictionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionRecord::Point { image, prediction: p } => write!(
                f,
                "image={image} class={} kind=point x={} y={} score={}",
                p.class, p.x, p.y, p.score
            ),
            PredictionRecord::Box { image, prediction: p } => write!(
                f,
                "image={image} class={} kind=box x0={} y0={} x1={} y1={} score={}",
                p.class, p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max, p.score
            ),
        }
    }
}

impl FromStr for PredictionRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("bad prediction record `{line}`: {msg}"));
        let fields: Vec<(&str, &str)> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| bad(format!("`{kv}` is not key=value"))))
            .collect::<Result<_>>()?;
        let get = |key: &str| {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| bad(format!("missing `{key}`")))
        };
        let num = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| bad(format!("bad `{key}`"))) };
        let image = get("image")?.to_string();
        let class = num("class")?;
        let score: f64 = get("score")?.parse().map_err(|_| bad("bad `score`".into()))?;
        match get("kind")? {
            "point" => Ok(PredictionRecord::Point {
                image,
                prediction: PointPrediction {
                    class,
                    x: num("x")?,
                    y: num("y")?,
                    score,
                },
            }),
            "box" => Ok(PredictionRecord::Box {
                image,
                prediction: BoxPrediction {
                    class,
                    bbox: BBox::new(num("x0")?, num("y0")?, num("x1")?, num("y1")?)?,
                    score,
                },
            }),
            other => Err(bad(format!("unknown kind `{other}`"))),
        }
    }
}
