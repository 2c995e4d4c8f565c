//! Library routines against the independent implementations in `wsod-testkit`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsod_core::detection::{
    cam_probabilities, connected_components, largest_component, predict_box_with, predict_point, BBox, BoxConfig,
    BoxPrediction, Connectivity, PointPrediction,
};
use wsod_core::metrics::{average_precision, corloc, pointloc_map, ImageTruth, IouComparison};
use wsod_core::numerics::{conv2d_forward, ConvParams, Tensor};
use wsod_core::ClassActivationMap;
use wsod_testkit::{
    brute_average_precision, brute_corloc, brute_pointloc, flood_fill, full_scan_argmax, largest_region, naive_conv2d,
    RawBox,
};

const FIXTURES: u64 = 1000;

fn random_box(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BBox {
    let x0 = rng.random_range(0..w - 1);
    let y0 = rng.random_range(0..h - 1);
    BBox::new(x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h)).unwrap()
}

fn raw(b: &BBox) -> RawBox {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

#[test]
fn point_prediction_equals_full_scan() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..12));
        // coarse values so ties are common
        let cam = ClassActivationMap::from_fn(c, h, w, |_, _, _| f64::from(rng.random_range(-3i32..4)) * 0.5);
        let probs = cam_probabilities(&cam);
        let (iw, ih) = (w * rng.random_range(1..9), h * rng.random_range(1..9));
        for k in 0..c {
            let p = predict_point(&probs, k, (iw, ih)).unwrap();
            let idx = full_scan_argmax(probs.channel(k));
            let (i, j) = (idx / w, idx % w);
            assert_eq!(p.x, ((2 * j + 1) * iw) / (2 * w), "seed {seed}");
            assert_eq!(p.y, ((2 * i + 1) * ih) / (2 * h), "seed {seed}");
            assert_eq!(p.score, probs.channel(k)[idx]);
        }
    }
}

#[test]
fn component_selection_equals_flood_fill() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let density = rng.random_range(0.1..0.9);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let ours = connected_components(&mask, h, w, conn);
            let theirs = flood_fill(&mask, h, w, eight);
            assert_eq!(ours.len(), theirs.len(), "seed {seed}");
            let a = largest_component(&ours);
            let b = largest_region(&theirs);
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(
                        (a.size, a.first_index, a.min_row, a.max_row, a.min_col, a.max_col),
                        (b.size, b.first_index, b.min_row, b.max_row, b.min_col, b.max_col),
                        "seed {seed}"
                    );
                }
                _ => panic!("seed {seed}: one side found no component"),
            }
        }
    }
}

#[test]
fn predicted_box_spans_selected_cells() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let map = ClassActivationMap::from_fn(1, h, w, |_, _, _| rng.random_range(0.0..1.0));
        let frac = rng.random_range(0.05..0.95);
        let (iw, ih) = (rng.random_range(w..=4 * w), rng.random_range(h..=4 * h));
        let pred = predict_box_with(
            &map,
            0,
            (iw, ih),
            &BoxConfig {
                threshold_frac: frac,
                ..BoxConfig::default()
            },
        )
        .unwrap()
        .unwrap();
        let max = map.channel(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mask: Vec<bool> = map.channel(0).iter().map(|&v| v > frac * max).collect();
        let regions = flood_fill(&mask, h, w, false);
        let r = largest_region(&regions).unwrap();
        let want = (r.min_col * iw / w, r.min_row * ih / h, (r.max_col + 1) * iw / w, (r.max_row + 1) * ih / h);
        assert_eq!(raw(&pred.bbox), want, "seed {seed}");
    }
}

#[test]
fn average_precision_equals_rank_counting() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..40);
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| (f64::from(rng.random_range(0..6u8)) / 5.0, rng.random_bool(0.4)))
            .collect();
        let retrieved = scored.iter().filter(|s| s.1).count();
        let positives = retrieved + rng.random_range(0..3);
        let ours = average_precision(&scored, positives);
        let theirs = brute_average_precision(&scored, positives);
        match (ours, theirs) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "seed {seed}"),
        }
    }
}

struct Fixture {
    truth: Vec<ImageTruth>,
    raw_truth: Vec<Vec<(usize, RawBox)>>,
}

fn random_truth(rng: &mut ChaCha8Rng, images: usize, classes: usize, w: usize, h: usize) -> Fixture {
    let mut truth = Vec::new();
    let mut raw_truth = Vec::new();
    for _ in 0..images {
        let boxes: Vec<(usize, BBox)> = (0..rng.random_range(0..4))
            .map(|_| (rng.random_range(0..classes), random_box(rng, w, h)))
            .collect();
        raw_truth.push(boxes.iter().map(|(k, b)| (*k, raw(b))).collect());
        truth.push(ImageTruth { boxes });
    }
    Fixture { truth, raw_truth }
}

#[test]
fn corloc_equals_brute_force() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
        let classes = rng.random_range(1..4);
        let images = rng.random_range(1..=10);
        let fx = random_truth(&mut rng, images, classes, w, h);
        let mut preds = Vec::new();
        let mut raw_preds = Vec::new();
        for t in &fx.truth {
            let mut p = Vec::new();
            for k in 0..classes {
                if !rng.random_bool(0.8) {
                    continue;
                }
                // half the time start from a ground-truth box so hits occur
                let bbox = match t.boxes_of(k).first() {
                    Some(g) if rng.random_bool(0.5) => {
                        let x1 = (g.x_max + rng.random_range(0..3)).min(w);
                        BBox::new(g.x_min, g.y_min, x1, g.y_max).unwrap()
                    }
                    _ => random_box(&mut rng, w, h),
                };
                p.push(BoxPrediction { class: k, bbox, score: 0.5 });
            }
            raw_preds.push(p.iter().map(|b| (b.class, raw(&b.bbox))).collect::<Vec<_>>());
            preds.push(p);
        }
        let ours = corloc(&preds, &fx.truth, classes, 0.5, IouComparison::Strict).unwrap();
        let (per_class, pooled) = brute_corloc(&raw_preds, &fx.raw_truth, classes, 0.5);
        assert_eq!(ours.per_class, per_class, "seed {seed}");
        assert_eq!(ours.pooled, pooled, "seed {seed}");
    }
}

#[test]
fn pointloc_equals_brute_force() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(4..40), rng.random_range(4..40));
        let classes = rng.random_range(1..4);
        let images = rng.random_range(1..=10);
        let fx = random_truth(&mut rng, images, classes, w, h);
        let tolerance = rng.random_range(0..4);
        let preds: Vec<Vec<PointPrediction>> = (0..images)
            .map(|_| {
                (0..classes)
                    .map(|k| PointPrediction {
                        class: k,
                        x: rng.random_range(0..w),
                        y: rng.random_range(0..h),
                        score: f64::from(rng.random_range(0..5u8)) / 4.0,
                    })
                    .collect()
            })
            .collect();
        let raw_points: Vec<Vec<(usize, usize, usize, f64)>> = preds
            .iter()
            .map(|ps| ps.iter().map(|p| (p.class, p.x, p.y, p.score)).collect())
            .collect();
        let ours = pointloc_map(&preds, &fx.truth, classes, tolerance, Default::default()).unwrap();
        let theirs = brute_pointloc(&raw_points, &fx.raw_truth, classes, tolerance);
        for (a, b) in ours.per_class.iter().zip(&theirs) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "seed {seed}"),
                (a, b) => assert_eq!(a, b, "seed {seed}"),
            }
        }
    }
}

#[test]
fn convolution_equals_nested_loops() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..5);
        let k = [1, 3][rng.random_range(0..2)];
        let padding = rng.random_range(0..=k / 2 + 1);
        let stride = rng.random_range(1..3);
        let (h, w) = (rng.random_range(k..9), rng.random_range(k..9));
        let input = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0));
        let kernel = Tensor::from_fn(&[o, c, k, k], |_| rng.random_range(-1.0..1.0));
        let bias: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = ConvParams::new(kernel.clone(), bias.clone()).unwrap();
        let ours = conv2d_forward(&input, &params, stride, padding).unwrap();
        let (theirs, dims) = naive_conv2d(input.data(), [n, c, h, w], kernel.data(), [o, c, k, k], &bias, stride, padding);
        assert_eq!(ours.shape(), dims.as_slice());
        for (a, b) in ours.data().iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}");
        }
    }
}
