use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use wsod_core::dataset::{load_dataset, Split};
use wsod_core::network::{Network, NetworkConfig};

fn wsod(args: &[&str]) -> Result<String, (i32, String)> {
    let mut out = Vec::new();
    let argv = std::iter::once("wsod").chain(args.iter().copied());
    match wsod_cli::run(argv, &mut out) {
        Ok(()) => Ok(String::from_utf8(out).unwrap()),
        Err(e) => Err((e.exit_code(), e.to_string())),
    }
}

fn ok(args: &[&str]) -> String {
    wsod(args).unwrap_or_else(|e| panic!("{args:?} failed: {e:?}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_wsod")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn small_data(dir: &Path, preset: &str, seed: &str) -> PathBuf {
    let data = dir.join(format!("data-{preset}-{seed}"));
    ok(&["gen-data", "--out", p(&data), "--images", "24", "--size", "16", "--seed", seed, "--bias-preset", preset]);
    data
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` line in\n{text}"))
}

fn metric(report: &str, name: &str, class: &str) -> f64 {
    field(report, &format!("metric={name} class={class} value=")).parse().unwrap()
}

#[test]
fn default_gen_data_writes_800_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--out", p(dir.path())]);
    assert!(out.contains("images: train=600 eval=200"), "{out}");
    let count = |split: &str| fs::read_dir(dir.path().join(split).join("images")).unwrap().count();
    assert_eq!(count("train") + count("eval"), 800);
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!((data.train[0].width, data.train[0].height, data.class_count), (64, 64, 4));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "uniform", "1");
    let missing = dir.path().join("missing.ckpt");
    for args in [
        vec!["eval", "--data", p(&data), "--checkpoint", p(&missing), "--task", "classify"],
        vec!["train", "--data", p(&data), "--bogus"],
        vec!["gen-data", "--out", "/proc/definitely/not/writable"],
        vec!["gen-data", "--out", p(&dir.path().join("x")), "--classes", "0"],
        vec!["eval", "--data", p(&data), "--checkpoint", p(&missing), "--task", "nonsense"],
    ] {
        let (code, stderr) = binary(&args);
        assert_eq!(code, 2, "{args:?}: {stderr}");
        assert!(stderr.starts_with("error:") && !stderr.starts_with("error: error:"), "{stderr}");
    }
    assert_eq!(binary(&["--help"]).0, 0);
}

#[test]
fn correlated_manifest_reports_off_diagonal_ppmi() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "correlated", "3");
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    let rows: Vec<Vec<f64>> = manifest
        .lines()
        .filter_map(|l| l.strip_prefix("train_ppmi="))
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let off_diagonal = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)));
    assert!(off_diagonal.clone().any(|(i, j)| rows[i][j] > 0.0));
    for (i, j) in off_diagonal {
        assert_eq!(rows[i][j], rows[j][i]);
    }
}

fn top_eigenvalue(text: &str) -> f64 {
    field(text, "eigenvalues: ").split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn inspect_reports_dimensions_and_structure() {
    let dir = tempfile::tempdir().unwrap();
    let uniform = dir.path().join("uniform");
    let correlated = dir.path().join("correlated");
    ok(&["gen-data", "--out", p(&uniform), "--size", "16", "--seed", "2"]);
    ok(&["gen-data", "--out", p(&correlated), "--size", "16", "--seed", "2", "--bias-preset", "correlated"]);

    let pyramid = ok(&["inspect-embedding", "--data", p(&uniform), "--labels", "pyramid2"]);
    assert!(pyramid.lines().next().unwrap().starts_with("dim=20 "), "{pyramid}");

    let flat = ok(&["inspect-embedding", "--data", p(&uniform)]);
    assert!(flat.starts_with("dim=4 units=600 split=train labels=image"), "{flat}");
    let pmi: Vec<Vec<f64>> = flat
        .lines()
        .skip_while(|l| !l.starts_with("PMI"))
        .skip(1)
        .take(4)
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(pmi[i][j].abs() <= 0.15, "PMI({i},{j}) = {}", pmi[i][j]);
            }
        }
    }
    let skewed = ok(&["inspect-embedding", "--data", p(&correlated)]);
    assert!(top_eigenvalue(&skewed) > top_eigenvalue(&flat));
}

#[test]
fn train_writes_checkpoint_embedding_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "correlated", "4");
    let ckpt = dir.path().join("pyr.ckpt");
    let common = ["--block-widths", "4", "--head-width", "4", "--batch-size", "2", "--seed", "1"];
    let mut args = vec!["train", "--data", p(&data), "--loss", "cosine-ppmi", "--labels", "pyramid2", "--iters", "5"];
    args.extend(["--checkpoint-out", p(&ckpt)]);
    args.extend(common);
    let out = ok(&args);
    assert!(out.contains("loss=cosine-ppmi labels=pyramid2 iterations=5 batch=2"), "{out}");
    let embedding = fs::read_to_string(wsod_cli::embedding_path(&ckpt)).unwrap();
    assert!(embedding.lines().next().unwrap().ends_with("dim=20"), "{embedding}");
    let log = fs::read_to_string(wsod_cli::loss_log_path(&ckpt)).unwrap();
    assert!(log.starts_with("# config="));
    let iters: Vec<&str> = log.lines().filter(|l| l.starts_with("iter=")).collect();
    assert_eq!(iters.len(), 5);
    assert!(iters[4].starts_with("iter=4 lr="), "{}", iters[4]);

    // warm start from the image-level stage, then a mismatched architecture
    let image = dir.path().join("img.ckpt");
    let mut args = vec!["train", "--data", p(&data), "--loss", "cosine-ppmi", "--iters", "3"];
    args.extend(["--checkpoint-out", p(&image)]);
    args.extend(common);
    ok(&args);
    let warm = dir.path().join("warm.ckpt");
    let mut args = vec!["train", "--data", p(&data), "--loss", "cosine-ppmi", "--labels", "pyramid2", "--iters", "3"];
    args.extend(["--warm-start", p(&image), "--checkpoint-out", p(&warm)]);
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--data", p(&data), "--iters", "3", "--warm-start", p(&image)];
    args.extend(["--checkpoint-out", p(&warm), "--block-widths", "8", "--head-width", "4"]);
    assert_eq!(wsod(&args).unwrap_err().0, 2);
}

#[test]
fn logistic_training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "uniform", "5");
    let ckpt = dir.path().join("log.ckpt");
    ok(&[
        "train", "--data", p(&data), "--loss", "logistic", "--iters", "150", "--block-widths", "4", "--head-width", "6",
        "--batch-size", "4", "--lr-initial", "0.01", "--lr-after", "0.01", "--no-augment", "--checkpoint-out", p(&ckpt),
    ]);
    let losses: Vec<f64> = fs::read_to_string(wsod_cli::loss_log_path(&ckpt))
        .unwrap()
        .lines()
        .filter_map(|l| l.split("loss=").nth(1))
        .map(|v| v.parse().unwrap())
        .collect();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}

/// Colour detectors wired straight into the class map: class `k` fires
/// exactly on pixels painted in its colour.
fn oracle_checkpoint(path: &Path, size: usize) {
    let config = NetworkConfig {
        input_width: size,
        input_height: size,
        block_widths: vec![],
        head_width: 4,
        ..NetworkConfig::new(4)
    };
    let mut net = Network::zeroed(config).unwrap();
    // centred colour weights and thresholds per class: disc, square, triangle, ring
    let detectors = [
        ([1.0, -1.0, -1.0], -0.72),
        ([-1.0, 1.0, -1.0], -0.6),
        ([-1.0, -1.0, 1.0], -0.6),
        ([1.0, 1.0, -1.0], -0.72),
    ];
    let layers = net.layers_mut();
    for (k, (w, b)) in detectors.iter().enumerate() {
        for c in 0..3 {
            // centre tap of the 3x3 kernel
            layers[0].kernel.data_mut()[((k * 3 + c) * 3 + 1) * 3 + 1] = w[c];
        }
        layers[0].bias[k] = *b;
        layers[1].kernel.data_mut()[k * 4 + k] = 1.0;
    }
    net.save(path).unwrap();
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("clean");
    let config = dir.path().join("clean.toml");
    fs::write(&config, "[dataset]\nnoise_sigma = 0.0\n").unwrap();
    ok(&["gen-data", "--out", p(&data), "--images", "40", "--size", "32", "--seed", "6", "--config", p(&config)]);
    let ckpt = dir.path().join("oracle.ckpt");
    oracle_checkpoint(&ckpt, 32);
    let d = p(&data);
    let c = p(&ckpt);

    let report_path = dir.path().join("classify.txt");
    let report = ok(&["eval", "--data", d, "--checkpoint", c, "--task", "classify", "--report-out", p(&report_path)]);
    assert_eq!(fs::read_to_string(&report_path).unwrap(), report);
    assert_eq!(field(&report, "task="), "classify");
    assert_eq!(field(&report, "split="), "eval");
    assert_eq!(field(&report, "images="), "10");
    assert_eq!(metric(&report, "classify_image_ap", "mean"), 1.0);

    let preds = dir.path().join("points.txt");
    let report = ok(&["eval", "--data", d, "--checkpoint", c, "--task", "pointloc", "--predictions-out", p(&preds)]);
    assert_eq!(metric(&report, "pointloc_ap", "mean"), 1.0);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 10 * 4);

    let act = ok(&["eval", "--data", d, "--checkpoint", c, "--task", "corloc", "--box-domain", "activation"]);
    assert_eq!(field(&act, "split="), "train");
    // touching same-class instances merge into one component, so a few
    // pairs miss even with perfect maps
    let v = metric(&act, "corloc", "mean");
    assert!(v >= 0.95 && v < 1.0, "{v}");
    // background sits at probability 0.5, above a tenth of any maximum
    let prob = ok(&["eval", "--data", d, "--checkpoint", c, "--task", "corloc"]);
    assert_eq!(metric(&prob, "corloc", "mean"), 0.0);
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(5, |b| b.is_ascii_whitespace()).collect();
    assert_eq!(header[0], b"P5");
    let num = |s: &[u8]| std::str::from_utf8(s).unwrap().parse::<usize>().unwrap();
    let (w, h) = (num(header[1]), num(header[2]));
    assert_eq!(num(header[3]), 255);
    (w, h, header[4].to_vec())
}

#[test]
fn export_cam_writes_maps_matching_direct_computation() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "correlated", "7");
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "train", "--data", p(&data), "--iters", "2", "--block-widths", "4", "--head-width", "4", "--batch-size", "2",
        "--checkpoint-out", p(&ckpt),
    ]);
    let out_dir = dir.path().join("cams");
    let sample = load_dataset(&data).unwrap().split(Split::Eval)[1].clone();
    ok(&["export-cam", "--data", p(&data), "--checkpoint", p(&ckpt), "--image-id", &sample.id, "--out-dir", p(&out_dir)]);
    let names: Vec<String> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("_prob.pgm")).count(), 4);
    assert_eq!(names.iter().filter(|n| n.ends_with("_mask.pgm")).count(), 4);
    assert!(names.contains(&format!("{}_cam.txt", sample.id)));

    // recompute: nearest-cell upsampling of sigmoid(CAM), scaled to a byte
    let net = Network::load(&ckpt).unwrap();
    let cam = net.forward_cam(&sample.to_tensor()).unwrap();
    let (ch, cw) = (cam.height(), cam.width());
    let (w, h, px) = read_pgm(&out_dir.join(format!("{}_class2_triangle_prob.pgm", sample.id)));
    assert_eq!((w, h), (16, 16));
    for y in 0..h {
        for x in 0..w {
            let v = cam.channel(2)[(y * ch / h) * cw + x * cw / w];
            let expect = (255.0 / (1.0 + (-v).exp())).round() as u8;
            assert_eq!(px[y * w + x], expect, "({x}, {y})");
        }
    }
    let (_, _, mask) = read_pgm(&out_dir.join(format!("{}_class2_triangle_mask.pgm", sample.id)));
    assert!(mask.iter().all(|&m| m == 0 || m == 255));
    assert!(mask.contains(&255));
}

#[test]
fn constant_network_exports_uniform_grey() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "uniform", "8");
    let ckpt = dir.path().join("zero.ckpt");
    let config = NetworkConfig {
        input_width: 16,
        input_height: 16,
        block_widths: vec![2],
        head_width: 2,
        ..NetworkConfig::new(4)
    };
    Network::zeroed(config).unwrap().save(&ckpt).unwrap();
    let out_dir = dir.path().join("cams");
    ok(&["export-cam", "--data", p(&data), "--checkpoint", p(&ckpt), "--image-id", "train_0000", "--out-dir", p(&out_dir)]);
    let (_, _, px) = read_pgm(&out_dir.join("train_0000_class0_disc_prob.pgm"));
    assert!(px.iter().all(|&v| v == 128), "{px:?}");
}
