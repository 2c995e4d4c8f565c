//! Synthetic shapes dataset: generation, on-disk format and loading.
//!
//! Every image holds one to a few coloured shapes on a noisy gray background.
//! Which classes appear together is driven by a pair-preference matrix so the
//! label co-occurrence statistics can be shaped. A dataset root holds
//! `manifest.txt` plus one directory per split, each with `images/<id>.ppm`,
//! `annotations.json` and its own `manifest.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{iou, BBox};
use crate::embedding::{fit_from_labels, format_matrix};
use crate::error::{Error, Result};
use crate::metrics::ImageTruth;
use crate::numerics::Tensor;
use crate::pyramid::LabeledPoint;
use crate::rng;

pub const FORMAT: &str = "wsod-shapes v1";
pub const MAX_CLASSES: usize = 8;

const CLASS_NAMES: [&str; MAX_CLASSES] = [
    "disc", "square", "triangle", "ring", "disc-b", "square-b", "triangle-b", "ring-b",
];

const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.45, 0.15, 0.60],
];

const BACKGROUND: f64 = 0.5;
const COLOR_JITTER: f64 = 0.08;
const RING_INNER: f64 = 0.55;
const PLACEMENT_ATTEMPTS: usize = 200;

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES[class % MAX_CLASSES]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasPreset {
    /// Every class pair equally likely.
    #[default]
    Uniform,
    /// Classes (0,1), (2,3), ... strongly prefer each other.
    Correlated,
}

impl FromStr for BiasPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BiasPreset::Uniform),
            "correlated" => Ok(BiasPreset::Correlated),
            other => Err(Error::Config(format!("unknown bias preset `{other}`"))),
        }
    }
}

impl fmt::Display for BiasPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasPreset::Uniform => "uniform",
            BiasPreset::Correlated => "correlated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    pub train_images: usize,
    pub eval_images: usize,
    /// Upper bound on shapes per image, duplicates included.
    pub max_objects: usize,
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Relative weight of drawing 1, 2, ... distinct classes per image.
    pub class_count_weights: Vec<f64>,
    /// Symmetric pair preferences; a class set is drawn with weight equal to
    /// the product of its pair entries.
    pub cooccurrence_bias: Vec<Vec<f64>>,
    /// Chance of adding one more instance of an already chosen class.
    pub duplicate_prob: f64,
    pub max_overlap_iou: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::with_preset(4, BiasPreset::Uniform)
    }
}

impl DatasetConfig {
    pub fn with_preset(class_count: usize, preset: BiasPreset) -> Self {
        let max_objects = 3;
        let (weights, bias): (Vec<f64>, Vec<Vec<f64>>) = match preset {
            BiasPreset::Uniform => (vec![0.45, 0.10, 0.45], vec![vec![1.0; class_count]; class_count]),
            BiasPreset::Correlated => (
                vec![0.3, 0.4, 0.3],
                (0..class_count)
                    .map(|i| {
                        (0..class_count)
                            .map(|j| if i / 2 == j / 2 { 10.0 } else { 0.2 })
                            .collect()
                    })
                    .collect(),
            ),
        };
        DatasetConfig {
            width: 64,
            height: 64,
            class_count,
            train_images: 600,
            eval_images: 200,
            max_objects,
            min_size_frac: 0.15,
            max_size_frac: 0.35,
            class_count_weights: weights.into_iter().take(class_count.min(max_objects)).collect(),
            cooccurrence_bias: bias,
            duplicate_prob: 0.5,
            max_overlap_iou: 0.2,
            noise_sigma: 0.03,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width < 8 || self.height < 8 {
            return bad(format!("image size {}x{} is below 8x8", self.width, self.height));
        }
        if self.class_count == 0 || self.class_count > MAX_CLASSES {
            return bad(format!("class count must lie in 1..={MAX_CLASSES}, got {}", self.class_count));
        }
        if self.max_objects == 0 {
            return bad("max_objects must be at least 1".into());
        }
        if !(self.min_size_frac > 0.0 && self.min_size_frac <= self.max_size_frac && self.max_size_frac < 1.0) {
            return bad(format!(
                "size range [{}, {}] must satisfy 0 < min <= max < 1",
                self.min_size_frac, self.max_size_frac
            ));
        }
        let k_max = self.class_count.min(self.max_objects);
        let w = &self.class_count_weights;
        if w.is_empty() || w.len() > k_max {
            return bad(format!("class_count_weights needs 1..={k_max} entries, got {}", w.len()));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return bad("class_count_weights must be non-negative with a positive sum".into());
        }
        let b = &self.cooccurrence_bias;
        if b.len() != self.class_count || b.iter().any(|row| row.len() != self.class_count) {
            return bad(format!("cooccurrence_bias must be {0}x{0}", self.class_count));
        }
        for i in 0..self.class_count {
            for j in 0..self.class_count {
                if !(b[i][j].is_finite() && b[i][j] >= 0.0) || b[i][j] != b[j][i] {
                    return bad(format!("cooccurrence_bias must be symmetric and non-negative (entry {i},{j})"));
                }
            }
        }
        for (p, name) in [(self.duplicate_prob, "duplicate_prob"), (self.max_overlap_iou, "max_overlap_iou")] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        for (k, table) in subset_tables(self).iter().enumerate() {
            if w[k] > 0.0 && table.iter().all(|(_, weight)| *weight == 0.0) {
                return bad(format!("no class set of size {} has positive weight", k + 1));
            }
        }
        Ok(())
    }

    pub fn image_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Eval => self.eval_images,
        }
    }

    /// Exact probability of each class appearing in an image.
    pub fn class_priors(&self) -> Vec<f64> {
        let mut priors = vec![0.0; self.class_count];
        self.for_each_set_probability(|set, p| {
            for &c in set {
                priors[c] += p;
            }
        });
        priors
    }

    /// Exact probability of classes `i` and `j` appearing together.
    pub fn pair_probability(&self, i: usize, j: usize) -> f64 {
        let mut total = 0.0;
        self.for_each_set_probability(|set, p| {
            if set.contains(&i) && set.contains(&j) {
                total += p;
            }
        });
        total
    }

    fn for_each_set_probability(&self, mut f: impl FnMut(&[usize], f64)) {
        let size_total: f64 = self.class_count_weights.iter().sum();
        for (k, table) in subset_tables(self).iter().enumerate() {
            let set_total: f64 = table.iter().map(|(_, w)| w).sum();
            if set_total == 0.0 {
                continue;
            }
            for (set, w) in table {
                f(set, self.class_count_weights[k] / size_total * w / set_total);
            }
        }
    }
}

/// For every set size `1..=class_count_weights.len()`, all class sets in
/// lexicographic order with their pair-product weights.
fn subset_tables(config: &DatasetConfig) -> Vec<Vec<(Vec<usize>, f64)>> {
    let c = config.class_count;
    let mut tables = vec![Vec::new(); config.class_count_weights.len()];
    for mask in 1u32..(1 << c) {
        let set: Vec<usize> = (0..c).filter(|&i| mask & (1 << i) != 0).collect();
        let k = set.len();
        if k > tables.len() {
            continue;
        }
        let mut weight = 1.0;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                weight *= config.cooccurrence_bias[i][j];
            }
        }
        tables[k - 1].push((set, weight));
    }
    for table in &mut tables {
        table.sort_by(|a, b| a.0.cmp(&b.0));
    }
    tables
}

/// One annotated object: its tight box and a single click point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub class: usize,
    pub bbox: BBox,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
    /// Sorted, distinct classes present.
    pub classes: Vec<usize>,
    pub instances: Vec<Instance>,
}

impl Sample {
    /// Image as a `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            f64::from(self.pixels[rest * 3 + ch]) / 255.0
        })
    }

    pub fn labeled_points(&self) -> Vec<LabeledPoint> {
        self.instances.iter().map(|i| LabeledPoint::new(i.class, i.x, i.y)).collect()
    }

    pub fn class_indicator(&self, class_count: usize) -> Vec<bool> {
        let mut v = vec![false; class_count];
        for &c in &self.classes {
            if c < class_count {
                v[c] = true;
            }
        }
        v
    }

    pub fn truth(&self) -> ImageTruth {
        ImageTruth {
            boxes: self.instances.iter().map(|i| (i.class, i.bbox)).collect(),
        }
    }

    fn validate(&self, class_count: usize, path: &Path) -> Result<()> {
        let bad = |message: String| {
            Err(Error::Invalid {
                path: path.to_path_buf(),
                message: format!("image {}: {message}", self.id),
            })
        };
        if self.pixels.len() != self.width * self.height * 3 {
            return bad(format!("expected {} pixel bytes, found {}", self.width * self.height * 3, self.pixels.len()));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.classes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("classes must be sorted and distinct".into());
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= class_count) {
            return bad(format!("class {c} out of range for {class_count} classes"));
        }
        for inst in &self.instances {
            if !inst.bbox.fits_in(self.width, self.height) {
                return bad(format!("box {:?} exceeds the image", inst.bbox));
            }
            if !inst.bbox.contains(inst.x, inst.y) {
                return bad(format!("point ({}, {}) lies outside its box", inst.x, inst.y));
            }
            if self.classes.binary_search(&inst.class).is_err() {
                return bad(format!("instance class {} missing from classes", inst.class));
            }
        }
        if self
            .classes
            .iter()
            .any(|c| !self.instances.iter().any(|i| i.class == *c))
        {
            return bad("a listed class has no instance".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    fn of_class(class: usize) -> Shape {
        [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring][class % 4]
    }

    /// Membership of a pixel centre for a shape of radius `r` around `(cx, cy)`.
    fn covers(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (RING_INNER * r).powi(2)
            }
        }
    }
}

struct Placed {
    mask: Vec<bool>,
    instance: Instance,
}

fn place_shape(class: usize, config: &DatasetConfig, rng: &mut ChaCha8Rng) -> Option<Placed> {
    let (w, h) = (config.width, config.height);
    let side = w.min(h) as f64;
    let r = rng.random_range(config.min_size_frac..=config.max_size_frac) * side / 2.0;
    let cx = rng.random_range(r..=w as f64 - r);
    let cy = rng.random_range(r..=h as f64 - r);
    let shape = Shape::of_class(class);
    let mask: Vec<bool> = (0..w * h)
        .map(|i| shape.covers((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, cx, cy, r))
        .collect();

    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
        sx += x;
        sy += y;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let (x, y) = match shape {
        Shape::Ring => {
            let (tx, ty) = (cx + r * (1.0 + RING_INNER) / 2.0, cy);
            let best = mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| i)
                .min_by(|&a, &b| {
                    let d = |i: usize| ((i % w) as f64 + 0.5 - tx).powi(2) + ((i / w) as f64 + 0.5 - ty).powi(2);
                    d(a).total_cmp(&d(b))
                })?;
            (best % w, best / w)
        }
        _ => (
            ((sx as f64 / n as f64).round() as usize).clamp(x0, x1 - 1),
            ((sy as f64 / n as f64).round() as usize).clamp(y0, y1 - 1),
        ),
    };
    let bbox = BBox::new(x0, y0, x1, y1).ok()?;
    Some(Placed {
        mask,
        instance: Instance { class, bbox, x, y },
    })
}

/// Deterministic sampler for one dataset configuration.
pub struct Generator {
    config: DatasetConfig,
    size_dist: WeightedIndex<f64>,
    sets: Vec<(Vec<Vec<usize>>, Option<WeightedIndex<f64>>)>,
}

impl Generator {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let size_dist =
            WeightedIndex::new(&config.class_count_weights).map_err(|e| Error::Config(format!("class_count_weights: {e}")))?;
        let sets = subset_tables(&config)
            .into_iter()
            .map(|table| {
                let weights: Vec<f64> = table.iter().map(|(_, w)| *w).collect();
                let sets = table.into_iter().map(|(s, _)| s).collect();
                (sets, WeightedIndex::new(&weights).ok())
            })
            .collect();
        Ok(Generator { config, size_dist, sets })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    fn draw_classes(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = self.size_dist.sample(rng);
        let (sets, dist) = &self.sets[k];
        let dist = dist.as_ref().expect("validated: every drawable size has a positive-weight set");
        sets[dist.sample(rng)].clone()
    }

    fn draw_sample(&self, id: String, rng: &mut ChaCha8Rng) -> Sample {
        let cfg = &self.config;
        let classes = self.draw_classes(rng);
        let mut objects = classes.clone();
        while objects.len() < cfg.max_objects && rng.random_bool(cfg.duplicate_prob) {
            objects.push(classes[rng.random_range(0..classes.len())]);
        }
        let placed = 'image: loop {
            let mut placed: Vec<Placed> = Vec::with_capacity(objects.len());
            for &class in &objects {
                let candidate = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                    place_shape(class, cfg, rng).filter(|p| {
                        placed
                            .iter()
                            .all(|q| iou(&p.instance.bbox, &q.instance.bbox) <= cfg.max_overlap_iou)
                    })
                });
                match candidate {
                    Some(p) => placed.push(p),
                    None => continue 'image,
                }
            }
            break placed;
        };

        let (w, h) = (cfg.width, cfg.height);
        let mut rgb = vec![BACKGROUND; w * h * 3];
        for p in &placed {
            let base = PALETTE[p.instance.class];
            let color: Vec<f64> = base
                .iter()
                .map(|c| (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
                .collect();
            for (i, _) in p.mask.iter().enumerate().filter(|(_, &m)| m) {
                rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
        let pixels = if cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
            rgb.iter().map(|&v| quantize(v + noise.sample(rng))).collect()
        } else {
            rgb.iter().map(|&v| quantize(v)).collect()
        };
        Sample {
            id,
            width: w,
            height: h,
            pixels,
            classes,
            instances: placed.into_iter().map(|p| p.instance).collect(),
        }
    }

    /// All samples of a split, reproducible from the configured seed.
    pub fn generate_split(&self, split: Split) -> Vec<Sample> {
        let mut rng = rng::stream(self.config.seed, &[split.stream_tag()]);
        (0..self.config.image_count(split))
            .map(|i| self.draw_sample(format!("{}_{i:04}", split.name()), &mut rng))
            .collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    /// Content hash recorded in the root manifest.
    pub content_sha256: Option<String>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// Summary of a generated dataset, as written to the root manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub split_hashes: BTreeMap<Split, String>,
    pub content_sha256: String,
    /// PPMI of the image-level training labels.
    pub train_ppmi: nalgebra::DMatrix<f64>,
    pub text: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary `P6` image with maxval 255; header comments are allowed.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let invalid = |message: &str| Error::Invalid {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| invalid("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(invalid("not a binary PPM (P6) file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| invalid("bad number in PPM header"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(invalid("PPM maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(invalid(&format!("expected {} raster bytes, found {}", w * h * 3, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: String,
    file: String,
    width: usize,
    height: usize,
    classes: Vec<usize>,
    points: Vec<[usize; 3]>,
    boxes: Vec<[usize; 5]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    format: String,
    split: String,
    class_count: usize,
    class_names: Vec<String>,
    images: Vec<ImageRecord>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("annotation records serialize")
}

fn record_of(sample: &Sample) -> ImageRecord {
    ImageRecord {
        id: sample.id.clone(),
        file: format!("images/{}.ppm", sample.id),
        width: sample.width,
        height: sample.height,
        classes: sample.classes.clone(),
        points: sample.instances.iter().map(|i| [i.class, i.x, i.y]).collect(),
        boxes: sample
            .instances
            .iter()
            .map(|i| [i.class, i.bbox.x_min, i.bbox.y_min, i.bbox.x_max, i.bbox.y_max])
            .collect(),
    }
}

/// Annotation JSON with one image record per line.
fn annotations_text(split: Split, class_count: usize, samples: &[Sample]) -> String {
    let names: Vec<&str> = (0..class_count).map(class_name).collect();
    let mut out = format!(
        "{{\n  \"format\": {},\n  \"split\": {},\n  \"class_count\": {class_count},\n  \"class_names\": {},\n  \"images\": [\n",
        to_json(&FORMAT),
        to_json(&split.name()),
        to_json(&names)
    );
    for (i, s) in samples.iter().enumerate() {
        out.push_str("    ");
        out.push_str(&to_json(&record_of(s)));
        out.push_str(if i + 1 < samples.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one split directory and returns its content hash.
pub fn write_split(dir: &Path, split: Split, class_count: usize, seed: u64, samples: &[Sample]) -> Result<String> {
    let images = dir.join("images");
    create_dir(&images)?;
    let annotations = annotations_text(split, class_count, samples);
    let mut hasher = Sha256::new();
    hasher.update(annotations.as_bytes());
    for s in samples {
        let ppm = encode_ppm(s.width, s.height, &s.pixels);
        hasher.update(&ppm);
        write_file(&images.join(format!("{}.ppm", s.id)), &ppm)?;
    }
    write_file(&dir.join("annotations.json"), annotations.as_bytes())?;
    let hash = hex(&hasher.finalize());
    let manifest = format!(
        "format={FORMAT}\nsplit={}\nseed={seed}\nimages={}\nclass_count={class_count}\ncontent_sha256={hash}\n",
        split.name(),
        samples.len()
    );
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(hash)
}

/// Generates both splits under `out` and writes the root manifest.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<Manifest> {
    let generator = Generator::new(config.clone())?;
    create_dir(out)?;
    let mut split_hashes = BTreeMap::new();
    let mut train_labels = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let samples = generator.generate_split(split);
        if split == Split::Train {
            train_labels = samples.iter().map(|s| s.class_indicator(config.class_count)).collect();
        }
        let hash = write_split(&out.join(split.name()), split, config.class_count, config.seed, &samples)?;
        split_hashes.insert(split, hash);
    }
    let mut hasher = Sha256::new();
    for h in split_hashes.values() {
        hasher.update(h.as_bytes());
    }
    let content_sha256 = hex(&hasher.finalize());
    let train_ppmi = if train_labels.is_empty() {
        nalgebra::DMatrix::zeros(config.class_count, config.class_count)
    } else {
        fit_from_labels(&train_labels)?.ppmi().clone()
    };

    let mut text = format!("format={FORMAT}\nseed={}\nconfig={}\n", config.seed, to_json(config));
    for (split, hash) in &split_hashes {
        text.push_str(&format!("{}_sha256={hash}\n", split.name()));
    }
    text.push_str(&format!("content_sha256={content_sha256}\n"));
    for line in format_matrix(&train_ppmi, 6).lines() {
        text.push_str(&format!("train_ppmi={line}\n"));
    }
    write_file(&out.join("manifest.txt"), text.as_bytes())?;
    Ok(Manifest {
        seed: config.seed,
        split_hashes,
        content_sha256,
        train_ppmi,
        text,
    })
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, n + 1, format!("expected key=value, got `{line}`")))?;
        entries.entry(k.to_string()).or_default().push(v.to_string());
    }
    match entries.get("format").map(Vec::as_slice) {
        Some([f]) if f == FORMAT => Ok(entries),
        _ => Err(Error::Invalid {
            path: path.to_path_buf(),
            message: format!("missing or unsupported format line (expected `format={FORMAT}`)"),
        }),
    }
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::parse(path, e.line(), format!("column {}: {e}", e.column()))
}

/// Loads and validates one split directory.
pub fn load_split(dir: &Path) -> Result<(usize, Vec<Sample>)> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = read_manifest(&manifest_path)?;
    let ann_path = dir.join("annotations.json");
    let ann_text = fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let ann: AnnotationFile = serde_json::from_slice(&ann_text).map_err(|e| json_error(&ann_path, e))?;
    let invalid = |message: String| Error::Invalid {
        path: ann_path.clone(),
        message,
    };
    if ann.format != FORMAT {
        return Err(invalid(format!("unsupported format `{}`", ann.format)));
    }
    if ann.class_count == 0 || ann.class_count > MAX_CLASSES {
        return Err(invalid(format!("class_count {} out of range", ann.class_count)));
    }
    let mut hasher = Sha256::new();
    hasher.update(&ann_text);
    let mut samples = Vec::with_capacity(ann.images.len());
    for rec in ann.images {
        if rec.points.len() != rec.boxes.len() {
            return Err(invalid(format!("image {}: {} points but {} boxes", rec.id, rec.points.len(), rec.boxes.len())));
        }
        let img_path = dir.join(&rec.file);
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        hasher.update(&bytes);
        let (w, h, pixels) = decode_ppm(&bytes, &img_path)?;
        if (w, h) != (rec.width, rec.height) {
            return Err(invalid(format!(
                "image {}: annotated as {}x{} but file is {w}x{h}",
                rec.id, rec.width, rec.height
            )));
        }
        let mut instances = Vec::with_capacity(rec.points.len());
        for (p, b) in rec.points.iter().zip(&rec.boxes) {
            if p[0] != b[0] {
                return Err(invalid(format!("image {}: point class {} paired with box class {}", rec.id, p[0], b[0])));
            }
            let bbox = BBox::new(b[1], b[2], b[3], b[4]).map_err(|e| invalid(format!("image {}: {e}", rec.id)))?;
            instances.push(Instance {
                class: p[0],
                bbox,
                x: p[1],
                y: p[2],
            });
        }
        let sample = Sample {
            id: rec.id,
            width: w,
            height: h,
            pixels,
            classes: rec.classes,
            instances,
        };
        sample.validate(ann.class_count, &ann_path)?;
        samples.push(sample);
    }
    if let Some([expected]) = manifest.get("content_sha256").map(Vec::as_slice) {
        let actual = hex(&hasher.finalize());
        if &actual != expected {
            return Err(Error::Invalid {
                path: manifest_path,
                message: format!("content hash mismatch: manifest {expected}, files {actual}"),
            });
        }
    }
    Ok((ann.class_count, samples))
}

/// Loads a dataset root with `train/` and `eval/` splits.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&root.join("manifest.txt"))?;
    let content_sha256 = manifest.get("content_sha256").and_then(|v| v.first()).cloned();
    let (c_train, train) = load_split(&root.join(Split::Train.name()))?;
    let (c_eval, eval) = load_split(&root.join(Split::Eval.name()))?;
    if c_train != c_eval {
        return Err(Error::Invalid {
            path: PathBuf::from(root),
            message: format!("splits disagree on class count ({c_train} vs {c_eval})"),
        });
    }
    Ok(Dataset {
        class_count: c_train,
        content_sha256,
        train,
        eval,
    })
}
