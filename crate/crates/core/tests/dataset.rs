use std::fs;
use std::path::Path;

use wsod_core::dataset::{
    generate_dataset, load_dataset, load_split, BiasPreset, DatasetConfig, Generator, Split,
};
use wsod_core::detection::BBox;
use wsod_core::embedding::{compute_pmi, count_cooccurrences};
use wsod_core::Error;

fn small(preset: BiasPreset, seed: u64) -> DatasetConfig {
    DatasetConfig {
        width: 32,
        height: 32,
        train_images: 24,
        eval_images: 8,
        seed,
        ..DatasetConfig::with_preset(4, preset)
    }
}

fn indicators(config: &DatasetConfig) -> Vec<Vec<bool>> {
    Generator::new(config.clone())
        .unwrap()
        .generate_split(Split::Train)
        .iter()
        .map(|s| s.class_indicator(config.class_count))
        .collect()
}

#[test]
fn generate_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(BiasPreset::Correlated, 5);
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let gen = Generator::new(config).unwrap();
    assert_eq!(loaded.class_count, 4);
    assert_eq!(loaded.train, gen.generate_split(Split::Train));
    assert_eq!(loaded.eval, gen.generate_split(Split::Eval));
    assert_eq!(loaded.content_sha256.as_deref(), Some(manifest.content_sha256.as_str()));
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = small(BiasPreset::Uniform, 9);
    let ma = generate_dataset(&config, a.path()).unwrap();
    let mb = generate_dataset(&config, b.path()).unwrap();
    assert_eq!(ma, mb);
    let mut files = 0;
    for split in ["train", "eval"] {
        for rel in ["annotations.json", "manifest.txt"] {
            let p = Path::new(split).join(rel);
            assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap());
            files += 1;
        }
        for entry in fs::read_dir(a.path().join(split).join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            let p = Path::new(split).join("images").join(&name);
            assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap());
            files += 1;
        }
    }
    assert_eq!(files, 4 + 24 + 8);
    assert_eq!(fs::read(a.path().join("manifest.txt")).unwrap(), fs::read(b.path().join("manifest.txt")).unwrap());

    let other = tempfile::tempdir().unwrap();
    let mc = generate_dataset(&small(BiasPreset::Uniform, 10), other.path()).unwrap();
    assert_ne!(ma.content_sha256, mc.content_sha256);
}

#[test]
fn truncated_annotations_report_position() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(BiasPreset::Uniform, 1), dir.path()).unwrap();
    let ann = dir.path().join("train/annotations.json");
    let text = fs::read_to_string(&ann).unwrap();
    fs::write(&ann, &text[..text.len() / 2]).unwrap();
    match load_split(&dir.path().join("train")) {
        Err(Error::Parse { path, line, message }) => {
            assert_eq!(path, ann);
            assert!(line > 1, "line {line}");
            assert!(message.contains("column"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

const GOLDEN_ANNOTATIONS: &str = r#"{
  "format": "wsod-shapes v1",
  "split": "train",
  "class_count": 2,
  "class_names": ["disc", "square"],
  "images": [
    {"id": "g0", "file": "images/g0.ppm", "width": 4, "height": 3, "classes": [0, 1],
     "points": [[0, 1, 1], [1, 3, 2], [0, 0, 0]],
     "boxes": [[0, 0, 0, 2, 2], [1, 2, 1, 4, 3], [0, 0, 0, 1, 1]]}
  ]
}
"#;

fn write_golden(dir: &Path) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::write(dir.join("annotations.json"), GOLDEN_ANNOTATIONS).unwrap();
    fs::write(dir.join("manifest.txt"), "format=wsod-shapes v1\nsplit=train\n").unwrap();
    let mut ppm = b"P6\n4 3\n255\n".to_vec();
    ppm.extend((0..36u8).map(|v| v * 7));
    fs::write(dir.join("images/g0.ppm"), ppm).unwrap();
}

#[test]
fn golden_fixture_parses_to_literals() {
    let dir = tempfile::tempdir().unwrap();
    write_golden(dir.path());
    let (classes, samples) = load_split(dir.path()).unwrap();
    assert_eq!(classes, 2);
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!(s.id, "g0");
    assert_eq!((s.width, s.height), (4, 3));
    assert_eq!(s.classes, vec![0, 1]);
    assert_eq!(s.pixels, (0..36u8).map(|v| v * 7).collect::<Vec<_>>());
    let inst: Vec<_> = s.instances.iter().map(|i| (i.class, i.x, i.y, i.bbox)).collect();
    assert_eq!(
        inst,
        vec![
            (0, 1, 1, BBox::new(0, 0, 2, 2).unwrap()),
            (1, 3, 2, BBox::new(2, 1, 4, 3).unwrap()),
            (0, 0, 0, BBox::new(0, 0, 1, 1).unwrap()),
        ]
    );
    // red channel of pixel (x=1, y=2) is byte (2*4+1)*3
    let t = s.to_tensor();
    assert_eq!(t.data()[2 * 4 + 1], f64::from(27u8 * 7) / 255.0);
}

#[test]
fn invariant_violations_are_rejected() {
    let cases = [
        // point outside its box
        ("[0, 1, 1], [1, 3, 2], [0, 0, 0]]", "[0, 1, 1], [1, 3, 2], [0, 3, 0]]"),
        // box leaves the image
        ("[1, 2, 1, 4, 3]", "[1, 2, 1, 5, 3]"),
        // class listed without an instance
        ("\"classes\": [0, 1]", "\"classes\": [0, 1, 1]"),
    ];
    for (from, to) in cases {
        let dir = tempfile::tempdir().unwrap();
        write_golden(dir.path());
        let ann = dir.path().join("annotations.json");
        fs::write(&ann, GOLDEN_ANNOTATIONS.replace(from, to)).unwrap();
        assert!(matches!(load_split(dir.path()), Err(Error::Invalid { .. })), "{to}");
    }
}

#[test]
fn tampered_image_fails_the_content_hash() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(BiasPreset::Uniform, 2), dir.path()).unwrap();
    let img = dir.path().join("eval/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&img).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(&img, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Invalid { .. })));
}

#[test]
fn uniform_preset_has_near_zero_pmi() {
    for seed in 0..5 {
        let config = DatasetConfig {
            seed,
            ..DatasetConfig::default()
        };
        assert_eq!(config.train_images, 600);
        let pmi = compute_pmi(&count_cooccurrences(&indicators(&config)).unwrap());
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let v = pmi.get(i, j).unwrap();
                    assert!(v.abs() <= 0.15, "seed {seed} PMI({i},{j}) = {v}");
                }
            }
        }
    }
}

#[test]
fn marginals_match_priors_within_three_standard_errors() {
    for preset in [BiasPreset::Uniform, BiasPreset::Correlated] {
        for seed in 0..3 {
            let config = DatasetConfig {
                seed,
                ..DatasetConfig::with_preset(4, preset)
            };
            let labels = indicators(&config);
            let n = labels.len() as f64;
            for (k, p) in config.class_priors().iter().enumerate() {
                let freq = labels.iter().filter(|l| l[k]).count() as f64 / n;
                let se = (p * (1.0 - p) / n).sqrt();
                assert!((freq - p).abs() <= 3.0 * se, "{preset} seed {seed} class {k}: {freq} vs {p}");
            }
        }
    }
}

#[test]
fn perfectly_paired_classes_have_self_information_pmi() {
    // only the sets {0,1} and {2,3} can be drawn
    let mut bias = vec![vec![0.0; 4]; 4];
    bias[0][1] = 1.0;
    bias[1][0] = 1.0;
    bias[2][3] = 1.0;
    bias[3][2] = 1.0;
    let config = DatasetConfig {
        class_count_weights: vec![0.0, 1.0],
        cooccurrence_bias: bias,
        ..DatasetConfig::default()
    };
    config.validate().unwrap();
    let labels = indicators(&config);
    assert!(labels.iter().all(|l| l[0] == l[1] && l[2] == l[3]));
    let p0 = labels.iter().filter(|l| l[0]).count() as f64 / labels.len() as f64;
    let pmi = compute_pmi(&count_cooccurrences(&labels).unwrap());
    assert!((pmi.get(0, 1).unwrap() + p0.ln()).abs() <= 1e-12);
    assert!(pmi.get(0, 2).is_none());
}

#[test]
fn generated_annotations_are_consistent() {
    let config = small(BiasPreset::Correlated, 4);
    let gen = Generator::new(config.clone()).unwrap();
    for s in gen.generate_split(Split::Train).iter().chain(&gen.generate_split(Split::Eval)) {
        assert!(!s.instances.is_empty() && s.instances.len() <= config.max_objects);
        for inst in &s.instances {
            assert!(inst.bbox.fits_in(s.width, s.height));
            assert!(inst.bbox.contains(inst.x, inst.y));
        }
    }
}
