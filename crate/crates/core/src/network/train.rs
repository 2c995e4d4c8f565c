use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::embedding::{fit_from_labels, EmbeddingModel};
use crate::error::{Error, Result};
use crate::losses::{binary_logistic_loss, EmbeddingLayer, LossOutput};
use crate::numerics::Tensor;
use crate::pyramid::{encode_labels, spp_average_pool, spp_average_pool_backward, PyramidLabelVector, PyramidSpec};
use crate::rng;

use super::augment::{augment, AugmentationConfig, TrainingSample};
use super::model::{Gradients, Network};

const SAMPLER_STREAM: u64 = 0x5a4d;
const AUGMENT_STREAM: u64 = 0xa06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    CosinePpmi,
    Logistic,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-ppmi" => Ok(LossMode::CosinePpmi),
            "logistic" => Ok(LossMode::Logistic),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected cosine-ppmi or logistic)"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::CosinePpmi => "cosine-ppmi",
            LossMode::Logistic => "logistic",
        })
    }
}

/// Granularity of the supervision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Class presence per image.
    #[default]
    Image,
    /// Presence per image and per tile of a 2×2 grid, from point annotations.
    Pyramid2,
}

impl LabelMode {
    pub fn spec(self, class_count: usize) -> Result<PyramidSpec> {
        match self {
            LabelMode::Image => PyramidSpec::image_level(class_count),
            LabelMode::Pyramid2 => PyramidSpec::two_level(class_count),
        }
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(LabelMode::Image),
            "pyramid2" => Ok(LabelMode::Pyramid2),
            other => Err(Error::Config(format!("unknown labels `{other}` (expected image or pyramid2)"))),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Image => "image",
            LabelMode::Pyramid2 => "pyramid2",
        })
    }
}

/// Step schedule: `initial` for the first `warmup_iters` iterations, then `after`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub warmup_iters: usize,
    pub after: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-4,
            warmup_iters: 600,
            after: 1e-3,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_iters {
            self.initial
        } else {
            self.after
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub labels: LabelMode,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            iterations: 3000,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            seed: 0,
            loss: LossMode::default(),
            labels: LabelMode::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Batch 256 for 2000 iterations.
    pub fn paper() -> Self {
        TrainingConfig {
            batch_size: 256,
            iterations: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let s = &self.schedule;
        if !(s.initial > 0.0 && s.after > 0.0 && s.initial.is_finite() && s.after.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if s.warmup_iters > self.iterations {
            return Err(Error::Config(format!(
                "warmup_iters {} exceeds iterations {}",
                s.warmup_iters, self.iterations
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.augmentation.validate()
    }
}

/// Supervision vector of a (possibly augmented) sample.
pub fn label_vector(sample: &TrainingSample, spec: &PyramidSpec) -> Result<PyramidLabelVector> {
    encode_labels(&sample.classes, &sample.points, (sample.width(), sample.height()), spec)
}

/// PPMI embedding fitted on the un-augmented supervision vectors.
pub fn fit_label_embedding(samples: &[Sample], spec: &PyramidSpec) -> Result<EmbeddingModel> {
    let labels = samples
        .iter()
        .map(|s| label_vector(&TrainingSample::from(s), spec).map(|v| v.bits().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    fit_from_labels(&labels)
}

/// Loss applied to the pooled class scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Logistic,
    Cosine(EmbeddingLayer),
}

impl Objective {
    pub fn new(mode: LossMode, embedding: Option<&EmbeddingModel>, spec: &PyramidSpec) -> Result<Self> {
        match mode {
            LossMode::Logistic => Ok(Objective::Logistic),
            LossMode::CosinePpmi => {
                let model = embedding
                    .ok_or_else(|| Error::Config("cosine-ppmi training needs an embedding model".into()))?;
                if model.class_dim() != spec.total_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: spec.total_dim(),
                        actual: model.class_dim(),
                    });
                }
                Ok(Objective::Cosine(EmbeddingLayer::new(model)))
            }
        }
    }

    /// `None` when the sample carries no usable direction for the cosine loss.
    pub fn evaluate(&self, pooled: &[f64], label: &PyramidLabelVector) -> Result<Option<LossOutput>> {
        match self {
            Objective::Logistic => binary_logistic_loss(pooled, label.bits()).map(Some),
            Objective::Cosine(layer) => match layer.loss(pooled, label.bits()) {
                Ok(out) => Ok(Some(out)),
                Err(Error::EmptyLabel | Error::DegenerateDirection(_)) => Ok(None),
                Err(e) => Err(e),
            },
        }
    }
}

/// Full loss of one image: network, pyramid pooling, objective. Parameter
/// gradients are added to `grads`. Returns `None` for skipped samples.
pub fn accumulate_sample(
    net: &Network,
    image: &Tensor,
    label: &PyramidLabelVector,
    objective: &Objective,
    grads: &mut Gradients,
) -> Result<Option<f64>> {
    let spec = label.spec();
    let pass = net.forward(image)?;
    let cam = pass.cam();
    let pooled = spp_average_pool(cam, spec)?;
    let Some(loss) = objective.evaluate(&pooled, label)? else {
        return Ok(None);
    };
    let grad_cam = spp_average_pool_backward(&loss.gradient, spec, (cam.classes(), cam.height(), cam.width()))?;
    net.backward(&pass, grad_cam.data(), grads)?;
    Ok(Some(loss.value))
}

/// SGD with momentum: `v ← μv + lr·g`, `w ← w − v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Gradients::zeros_like(net).groups().to_vec(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        for ((params, g), v) in net.param_groups_mut().zip(grads.groups()).zip(&mut self.velocity) {
            for ((w, &gi), vi) in params.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + lr * gi;
                *w -= *vi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    /// Mean loss over the used samples of the batch; NaN if all were skipped.
    pub loss: f64,
    pub used: usize,
}

impl fmt::Display for IterationLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} lr={} loss={:.8}", self.iteration, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub skipped_samples: usize,
    /// Objective as used during training, including the fixed embedding layer.
    pub objective: Objective,
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        Sampler {
            rng: rng::stream(seed, &[SAMPLER_STREAM]),
            order: (0..len).collect(),
            next: len,
        }
    }

    fn draw(&mut self) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Mini-batch training. `on_iteration` sees every iteration's log record.
pub fn train(
    net: &mut Network,
    samples: &[Sample],
    config: &TrainingConfig,
    embedding: Option<&EmbeddingModel>,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let spec = config.labels.spec(net.config().class_count)?;
    let objective = Objective::new(config.loss, embedding, &spec)?;
    let base: Vec<TrainingSample> = samples.iter().map(TrainingSample::from).collect();

    let mut sampler = Sampler::new(base.len(), config.seed);
    let mut sgd = Sgd::new(net, config.momentum);
    let mut grads = Gradients::zeros_like(net);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut skipped = 0;
    for iteration in 0..config.iterations {
        let lr = config.schedule.at(iteration);
        grads.fill_zero();
        let (mut total, mut used) = (0.0, 0usize);
        for slot in 0..config.batch_size {
            let idx = sampler.draw();
            let mut rng = rng::stream(config.seed, &[AUGMENT_STREAM, iteration as u64, slot as u64]);
            let sample = augment(&base[idx], &config.augmentation, &mut rng);
            let label = label_vector(&sample, &spec)?;
            match accumulate_sample(net, &sample.image, &label, &objective, &mut grads)? {
                Some(loss) => {
                    total += loss;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let loss = if used > 0 {
            grads.scale(1.0 / used as f64);
            sgd.step(net, &grads, lr);
            total / used as f64
        } else {
            f64::NAN
        };
        losses.push(loss);
        on_iteration(&IterationLog {
            iteration,
            lr,
            loss,
            used,
        });
    }
    Ok(TrainOutcome {
        losses,
        skipped_samples: skipped,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_switches_after_warmup() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(599), 1e-4);
        assert_eq!(s.at(600), 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig::paper().validate().is_ok());
        let short = TrainingConfig {
            iterations: 100,
            ..TrainingConfig::default()
        };
        assert!(short.validate().is_err());
        let zero_lr = TrainingConfig {
            schedule: LrSchedule {
                initial: 0.0,
                ..LrSchedule::default()
            },
            ..TrainingConfig::default()
        };
        assert!(zero_lr.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("cosine-ppmi".parse::<LossMode>().unwrap(), LossMode::CosinePpmi);
        assert_eq!("pyramid2".parse::<LabelMode>().unwrap(), LabelMode::Pyramid2);
        assert!("l2".parse::<LossMode>().is_err());
        assert_eq!(LabelMode::Pyramid2.spec(3).unwrap().total_dim(), 15);
    }
}
