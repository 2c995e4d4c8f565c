use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsod_core::dataset::{BiasPreset, DatasetConfig, Generator, Sample, Split};
use wsod_core::detection::BBox;
use wsod_core::losses::EmbeddingLayer;
use wsod_core::network::augment::{mirror, translate};
use wsod_core::network::{
    augment, fit_label_embedding, train, AugmentationConfig, IterationLog, LabelMode, LossMode, LrSchedule, Network,
    NetworkConfig, TrainingConfig, TrainingSample,
};
use wsod_core::numerics::Tensor;
use wsod_core::pyramid::LabeledPoint;

fn tiny_samples(count: usize, seed: u64) -> Vec<Sample> {
    let config = DatasetConfig {
        width: 16,
        height: 16,
        train_images: count,
        eval_images: 1,
        seed,
        ..DatasetConfig::with_preset(3, BiasPreset::Correlated)
    };
    Generator::new(config).unwrap().generate_split(Split::Train)
}

fn tiny_net(classes: usize, seed: u64) -> Network {
    let config = NetworkConfig {
        input_width: 16,
        input_height: 16,
        block_widths: vec![4],
        head_width: 6,
        ..NetworkConfig::new(classes)
    };
    Network::build(config, seed).unwrap()
}

fn short_run(loss: LossMode, labels: LabelMode, iterations: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 2,
        iterations,
        schedule: LrSchedule {
            initial: 1e-3,
            warmup_iters: 0,
            after: 1e-3,
        },
        loss,
        labels,
        seed: 4,
        ..TrainingConfig::default()
    }
}

/// One bright rectangle on a dark frame.
fn one_shape(w: usize, h: usize, b: BBox) -> TrainingSample {
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (y, x) = ((i % (h * w)) / w, i % w);
        if b.contains(x, y) {
            1.0
        } else {
            0.0
        }
    });
    TrainingSample {
        image,
        classes: vec![0],
        points: vec![LabeledPoint::new(0, (b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2)],
        boxes: vec![(0, b)],
    }
}

fn pixel(t: &Tensor, c: usize, x: usize, y: usize) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()[c * h * w + y * w + x]
}

#[test]
fn translation_moves_pixels_and_box_together() {
    let src = one_shape(20, 16, BBox::new(4, 5, 9, 11).unwrap());
    let out = translate(&src, 3, 0);
    assert_eq!(out.boxes, vec![(0, BBox::new(7, 5, 12, 11).unwrap())]);
    assert_eq!(out.points, vec![LabeledPoint::new(0, 9, 8)]);
    // render-then-compare: every moved pixel coincides with its source
    for y in 0..16 {
        for x in 3..20 {
            for c in 0..3 {
                assert_eq!(pixel(&out.image, c, x, y), pixel(&src.image, c, x - 3, y));
            }
        }
        // uncovered columns replicate the left edge
        for x in 0..3 {
            assert_eq!(pixel(&out.image, 0, x, y), pixel(&src.image, 0, 0, y));
        }
    }
    // the lit region of the output is exactly the moved box
    let (_, b) = out.boxes[0];
    for y in 0..16 {
        for x in 0..20 {
            assert_eq!(pixel(&out.image, 1, x, y) == 1.0, b.contains(x, y), "({x}, {y})");
        }
    }
}

#[test]
fn mirror_reflects_points() {
    let src = one_shape(20, 16, BBox::new(4, 5, 9, 11).unwrap());
    let out = mirror(&src);
    let p = src.points[0];
    assert_eq!(out.points, vec![LabeledPoint::new(0, 19 - p.x, p.y)]);
    assert_eq!(out.boxes, vec![(0, BBox::new(11, 5, 16, 11).unwrap())]);
}

#[test]
fn disabled_augmentation_is_identity() {
    let src = one_shape(12, 12, BBox::new(1, 2, 6, 7).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&src, &AugmentationConfig::disabled(), &mut rng), src);
}

#[test]
fn equal_seeds_give_equal_histories() {
    let samples = tiny_samples(6, 1);
    let spec = LabelMode::Pyramid2.spec(3).unwrap();
    let model = fit_label_embedding(&samples, &spec).unwrap();
    let config = short_run(LossMode::CosinePpmi, LabelMode::Pyramid2, 15);
    let run = || {
        let mut net = tiny_net(3, 2);
        let mut logs = Vec::new();
        let outcome = train(&mut net, &samples, &config, Some(&model), |l| logs.push(*l)).unwrap();
        (net.parameters(), outcome.losses, logs)
    };
    let (pa, la, ga) = run();
    let (pb, lb, gb) = run();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.len(), 15);
    assert_eq!(ga.iter().map(ToString::to_string).collect::<Vec<_>>(), gb.iter().map(ToString::to_string).collect::<Vec<_>>());
}

#[test]
fn embedding_layer_is_untouched_by_training() {
    let samples = tiny_samples(8, 2);
    let spec = LabelMode::Image.spec(3).unwrap();
    let model = fit_label_embedding(&samples, &spec).unwrap();
    let before: Vec<u64> = EmbeddingLayer::new(&model)
        .linear()
        .weight()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    let mut net = tiny_net(3, 3);
    let start = net.parameters();
    let outcome = train(&mut net, &samples, &short_run(LossMode::CosinePpmi, LabelMode::Image, 200), Some(&model), |_| {})
        .unwrap();
    let wsod_core::network::Objective::Cosine(layer) = &outcome.objective else {
        panic!("cosine objective expected");
    };
    let after: Vec<u64> = layer.linear().weight().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert!(!layer.linear().trainable());
    // the trainable parameters did move
    assert_ne!(start, net.parameters());
}

#[test]
fn schedule_switches_at_six_hundred() {
    let samples = tiny_samples(2, 3);
    let mut net = tiny_net(3, 4);
    let config = TrainingConfig {
        batch_size: 1,
        iterations: 601,
        loss: LossMode::Logistic,
        labels: LabelMode::Image,
        ..TrainingConfig::default()
    };
    let mut logs: Vec<IterationLog> = Vec::new();
    train(&mut net, &samples, &config, None, |l| logs.push(*l)).unwrap();
    assert_eq!(logs[599].lr, 0.0001);
    assert_eq!(logs[600].lr, 0.001);
    assert_eq!(logs[600].to_string().split(' ').nth(1), Some("lr=0.001"));
}

#[test]
fn embedding_dimension_must_match_labels() {
    let samples = tiny_samples(4, 5);
    let image_model = fit_label_embedding(&samples, &LabelMode::Image.spec(3).unwrap()).unwrap();
    let mut net = tiny_net(3, 5);
    let config = short_run(LossMode::CosinePpmi, LabelMode::Pyramid2, 1);
    assert!(matches!(
        train(&mut net, &samples, &config, Some(&image_model), |_| {}),
        Err(wsod_core::Error::DimensionMismatch { expected: 15, actual: 3 })
    ));
}

fn overfit(loss: LossMode) -> (f64, f64) {
    let samples: Vec<Sample> = tiny_samples(5, 6).into_iter().filter(|s| s.classes.len() == 1).take(1).collect();
    assert_eq!(samples.len(), 1);
    let embedding = match loss {
        LossMode::CosinePpmi => {
            // fit on the wider set so the class direction is non-degenerate
            Some(fit_label_embedding(&tiny_samples(40, 7), &LabelMode::Image.spec(3).unwrap()).unwrap())
        }
        LossMode::Logistic => None,
    };
    let mut net = tiny_net(3, 8);
    let config = TrainingConfig {
        batch_size: 1,
        iterations: 500,
        schedule: LrSchedule {
            initial: 0.01,
            warmup_iters: 0,
            after: 0.01,
        },
        loss,
        labels: LabelMode::Image,
        augmentation: AugmentationConfig::disabled(),
        ..TrainingConfig::default()
    };
    let outcome = train(&mut net, &samples, &config, embedding.as_ref(), |_| {}).unwrap();
    (outcome.losses[0], *outcome.losses.last().unwrap())
}

#[test]
fn single_sample_overfits_with_logistic_loss() {
    let (first, last) = overfit(LossMode::Logistic);
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn single_sample_overfits_with_cosine_loss() {
    let (first, last) = overfit(LossMode::CosinePpmi);
    assert!(last < 0.1 * first, "{first} -> {last}");
}
