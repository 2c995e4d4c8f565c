use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pyramid::LabeledPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub translate: bool,
    pub max_translation_frac: f64,
    pub rotate: bool,
    pub max_rotation_deg: f64,
    pub noise: bool,
    pub noise_sigma: f64,
    pub mirror: bool,
    pub mirror_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            translate: true,
            max_translation_frac: 0.05,
            rotate: true,
            max_rotation_deg: 5.0,
            noise: true,
            noise_sigma: 0.02,
            mirror: true,
            mirror_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            translate: false,
            rotate: false,
            noise: false,
            mirror: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.max_translation_frac, "max_translation_frac"),
            (self.mirror_prob, "mirror_prob"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0) {
            return Err(Error::Config(format!(
                "max_rotation_deg must be non-negative, got {}",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// An image with the annotations that follow it through geometric transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Image-level classes; never dropped by augmentation.
    pub classes: Vec<usize>,
    pub points: Vec<LabeledPoint>,
    pub boxes: Vec<(usize, BBox)>,
}

impl From<&Sample> for TrainingSample {
    fn from(s: &Sample) -> Self {
        TrainingSample {
            image: s.to_tensor(),
            classes: s.classes.clone(),
            points: s.labeled_points(),
            boxes: s.instances.iter().map(|i| (i.class, i.bbox)).collect(),
        }
    }
}

impl TrainingSample {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    /// Resamples every channel: output pixel `(x, y)` reads `source(x, y)`,
    /// clamped to the frame.
    fn resample(&self, source: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
        let (w, h) = (self.width(), self.height());
        let src = self.image.data();
        let mut out = Tensor::zeros(self.image.shape());
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = source(x as f64, y as f64);
                let sx = (sx.round().max(0.0) as usize).min(w - 1);
                let sy = (sy.round().max(0.0) as usize).min(h - 1);
                for c in 0..3 {
                    dst[c * h * w + y * w + x] = src[c * h * w + sy * w + sx];
                }
            }
        }
        out
    }

    /// Maps points and boxes forward, dropping those that leave the frame.
    fn map_annotations(&self, point: impl Fn(f64, f64) -> (f64, f64)) -> (Vec<LabeledPoint>, Vec<(usize, BBox)>) {
        let (w, h) = (self.width() as f64, self.height() as f64);
        let points = self
            .points
            .iter()
            .filter_map(|p| {
                let (x, y) = point(p.x as f64, p.y as f64);
                let (x, y) = (x.round(), y.round());
                (x >= 0.0 && y >= 0.0 && x < w && y < h).then(|| LabeledPoint::new(p.class, x as usize, y as usize))
            })
            .collect();
        let boxes = self
            .boxes
            .iter()
            .filter_map(|(k, b)| {
                // pixel-index corners of the box
                let corners = [
                    (b.x_min as f64, b.y_min as f64),
                    ((b.x_max - 1) as f64, b.y_min as f64),
                    (b.x_min as f64, (b.y_max - 1) as f64),
                    ((b.x_max - 1) as f64, (b.y_max - 1) as f64),
                ]
                .map(|(x, y)| point(x, y));
                let x0 = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).round().max(0.0);
                let y0 = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).round().max(0.0);
                let x1 = (corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).round() + 1.0).min(w);
                let y1 = (corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).round() + 1.0).min(h);
                if x1 <= x0 || y1 <= y0 {
                    return None;
                }
                BBox::new(x0 as usize, y0 as usize, x1 as usize, y1 as usize)
                    .ok()
                    .map(|b| (*k, b))
            })
            .collect();
        (points, boxes)
    }
}

/// Shift by whole pixels; uncovered pixels replicate the nearest edge.
pub fn translate(sample: &TrainingSample, dx: i64, dy: i64) -> TrainingSample {
    let (fx, fy) = (dx as f64, dy as f64);
    let image = sample.resample(|x, y| (x - fx, y - fy));
    let (points, boxes) = sample.map_annotations(|x, y| (x + fx, y + fy));
    TrainingSample {
        image,
        classes: sample.classes.clone(),
        points,
        boxes,
    }
}

/// Rotation about the image centre with nearest-neighbour sampling.
pub fn rotate(sample: &TrainingSample, degrees: f64) -> TrainingSample {
    let (cx, cy) = ((sample.width() as f64 - 1.0) / 2.0, (sample.height() as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let image = sample.resample(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    });
    let (points, boxes) = sample.map_annotations(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    });
    TrainingSample {
        image,
        classes: sample.classes.clone(),
        points,
        boxes,
    }
}

/// Reflection about the vertical axis: `x → W − 1 − x`.
pub fn mirror(sample: &TrainingSample) -> TrainingSample {
    let last = sample.width() as f64 - 1.0;
    let image = sample.resample(|x, y| (last - x, y));
    let (points, boxes) = sample.map_annotations(|x, y| (last - x, y));
    TrainingSample {
        image,
        classes: sample.classes.clone(),
        points,
        boxes,
    }
}

pub fn add_noise<R: Rng + ?Sized>(sample: &TrainingSample, sigma: f64, rng: &mut R) -> TrainingSample {
    let mut out = sample.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is non-negative and finite");
        for v in out.image.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Translation, rotation, pixel noise and mirroring, in that order, each only
/// when enabled. Random draws happen only for enabled transforms.
pub fn augment<R: Rng + ?Sized>(sample: &TrainingSample, config: &AugmentationConfig, rng: &mut R) -> TrainingSample {
    let mut s = sample.clone();
    if config.translate && config.max_translation_frac > 0.0 {
        let max_x = config.max_translation_frac * s.width() as f64;
        let max_y = config.max_translation_frac * s.height() as f64;
        let dx = rng.random_range(-max_x..=max_x).round() as i64;
        let dy = rng.random_range(-max_y..=max_y).round() as i64;
        s = translate(&s, dx, dy);
    }
    if config.rotate && config.max_rotation_deg > 0.0 {
        let angle = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg);
        s = rotate(&s, angle);
    }
    if config.noise {
        s = add_noise(&s, config.noise_sigma, rng);
    }
    if config.mirror && rng.random_bool(config.mirror_prob) {
        s = mirror(&s);
    }
    s
}
