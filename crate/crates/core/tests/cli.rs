use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use filtnorm::cli::output::read_csv;
use filtnorm::data::{to_idx_bytes, Dataset, Split};
use filtnorm::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_filtnorm"));
    c.env_remove("FILTNORM_DATA_DIR");
    c
}

/// Digit-like patterns: class `k` lights up a horizontal band.
fn fake_split(n: usize, split: Split, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut data = Vec::with_capacity(n * 784);
    for &l in &labels {
        for p in 0..784 {
            let row = p / 28;
            let on = row / 3 == l as usize;
            let v: f64 = if on { 200.0 } else { 0.0 } + rng.random_range(0.0..40.0);
            data.push(v.floor() / 255.0);
        }
    }
    Dataset {
        images: Tensor::new(vec![n, 1, 28, 28], data).unwrap(),
        labels,
        split,
        num_classes: 10,
    }
}

fn fake_mnist(dir: &Path) {
    for (ds, img, lab) in [
        (fake_split(300, Split::Train, 1), "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (fake_split(100, Split::Test, 2), "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let (i, l) = to_idx_bytes(&ds).unwrap();
        fs::write(dir.join(img), i).unwrap();
        fs::write(dir.join(lab), l).unwrap();
    }
}

struct Env {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn env() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    fake_mnist(&data);
    let root = tmp.path().to_path_buf();
    Env { _tmp: tmp, data, root }
}

fn run(e: &Env, args: &[&str], out: &str) -> (i32, PathBuf) {
    let out = e.root.join(out);
    let status = bin()
        .args(args)
        .arg("--data-dir")
        .arg(&e.data)
        .arg("--out")
        .arg(&out)
        .arg("--workers")
        .arg("2")
        .output()
        .unwrap();
    assert!(
        status.status.code().is_some(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    (status.status.code().unwrap(), out)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &[&str] = &["--iters", "20", "--batch", "20", "--eval-every", "10"];

#[test]
fn train_writes_curve_and_summary_reproducibly() {
    let e = env();
    let args: Vec<&str> = ["train", "--norm", "fbn", "--tsigma", "4", "--seeds", "2"]
        .iter()
        .chain(QUICK)
        .copied()
        .collect();
    let (code, a) = run(&e, &args, "a");
    assert_eq!(code, 0);
    let (code, b) = run(&e, &args, "b");
    assert_eq!(code, 0);
    let curve_a = fs::read(a.join("curve.csv")).unwrap();
    assert_eq!(curve_a, fs::read(b.join("curve.csv")).unwrap());

    let (header, rows) = read_csv(&a.join("curve.csv"), "curve").unwrap();
    assert_eq!(header, ["seed", "iteration", "loss", "test_accuracy"]);
    assert_eq!(rows.len(), 40);
    assert!(!rows[9][3].is_empty());
    assert!(rows[8][3].is_empty());

    let s = json(&a.join("summary.json"));
    assert_eq!(s["runs"].as_array().unwrap().len(), 2);
    assert_eq!(s["label"], "lenet5[fc84=fbn]");
    assert_eq!(s["options"]["tsigma"], 4.0);
    let mut sb = json(&b.join("summary.json"));
    let mut sa = s.clone();
    for v in [&mut sa, &mut sb] {
        v.as_object_mut().unwrap().remove("meta");
        v["options"].as_object_mut().unwrap().remove("out");
    }
    assert_eq!(sa, sb);
}

#[test]
fn no_norm_baseline_and_checkpoints() {
    let e = env();
    let args: Vec<&str> = ["train", "--norm", "none", "--arch", "mlp", "--checkpoint", "true"]
        .iter()
        .chain(QUICK)
        .copied()
        .collect();
    let (code, out) = run(&e, &args, "plain");
    assert_eq!(code, 0);
    assert_eq!(json(&out.join("summary.json"))["label"], "mlp[none]");
    let ckpts: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|d| d.ok())
        .filter(|d| d.path().extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    let ck = filtnorm::train::load_checkpoint::<f32>(&ckpts[0].path()).unwrap();
    assert!(ck.model.norm_slots().is_empty());
}

#[test]
fn config_errors_exit_with_two() {
    let e = env();
    let missing = bin()
        .args(["train", "--data-dir", "/definitely/not/here", "--out"])
        .arg(e.root.join("x"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("FILTNORM_DATA_DIR"));

    assert_eq!(bin().args(["train", "--no-such-flag"]).status().unwrap().code(), Some(2));
    assert_eq!(run(&e, &["train", "--slot", "conv9", "--iters", "1"], "s").0, 2);
    assert_eq!(run(&e, &["train", "--norm", "weird"], "w").0, 2);
    assert_eq!(run(&e, &["grid", "--tsigmas", ""], "g").0, 2);
    assert_eq!(run(&e, &["train", "--lr", "-1"], "l").0, 2);

    let cfg = e.root.join("bad.toml");
    fs::write(&cfg, "iters = 5\nunknown-key = 3\n").unwrap();
    assert_eq!(bin().arg("train").arg("--config").arg(&cfg).status().unwrap().code(), Some(2));
}

#[test]
fn data_dir_comes_from_the_environment() {
    let e = env();
    let out = e.root.join("envrun");
    let status = bin()
        .env("FILTNORM_DATA_DIR", &e.data)
        .args(["train", "--arch", "mlp", "--iters", "2", "--batch", "10", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("curve.csv").is_file());
}

#[test]
fn divergence_exits_with_three() {
    let e = env();
    let (code, _) = run(&e, &["train", "--norm", "none", "--iters", "30", "--batch", "20", "--lr", "1e6"], "div");
    assert_eq!(code, 3);
}

#[test]
fn config_file_with_flag_override() {
    let e = env();
    let cfg = e.root.join("exp.toml");
    fs::write(
        &cfg,
        "arch = \"mlp\"\nnorm = \"bn\"\niters = 7\nbatch = 10\neval-every = 0\nseeds = 1\n",
    )
    .unwrap();
    let out = e.root.join("cfg");
    let status = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--iters", "4", "--data-dir"])
        .arg(&e.data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let s = json(&out.join("summary.json"));
    assert_eq!(s["options"]["iters"], 4);
    assert_eq!(s["options"]["norm"], "bn");
    assert_eq!(s["label"], "mlp[fc128=bn,fc256=bn]");
    let (_, rows) = read_csv(&out.join("curve.csv"), "curve").unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn single_cell_grid_matches_train() {
    let e = env();
    let common = ["--norm", "fbn", "--iters", "12", "--seeds", "2", "--eval-every", "0"];
    let mut g: Vec<&str> = vec!["grid", "--tsigmas", "3", "--batches", "20"];
    g.extend(common);
    let (code, grid) = run(&e, &g, "grid");
    assert_eq!(code, 0);
    let mut t: Vec<&str> = vec!["train", "--tsigma", "3", "--batch", "20"];
    t.extend(common);
    let (code, train) = run(&e, &t, "train");
    assert_eq!(code, 0);
    let (header, rows) = read_csv(&grid.join("grid.csv"), "grid").unwrap();
    assert_eq!(header, ["batch_size", "t_sigma", "mean_acc", "std_acc", "runs"]);
    assert_eq!(rows.len(), 1);
    let mean: f64 = rows[0][2].parse().unwrap();
    assert_eq!(mean, json(&train.join("summary.json"))["mean_accuracy"].as_f64().unwrap());
}

#[test]
fn grid_has_one_row_per_cell() {
    let e = env();
    let (code, out) = run(
        &e,
        &["grid", "--tsigmas", "2,4", "--batches", "10,20", "--iters", "3", "--eval-every", "0"],
        "grid",
    );
    assert_eq!(code, 0);
    let (_, rows) = read_csv(&out.join("grid.csv"), "grid").unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][..2], ["10".to_string(), "2".to_string()]);
}

#[test]
fn synthetic_moment_consistency_and_profile() {
    let e = env();
    let (code, out) = run(&e, &["moment-consistency", "--steps", "40", "--channels", "4"], "mc");
    assert_eq!(code, 0);
    let (header, rows) = read_csv(&out.join("moment_consistency.csv"), "moment-consistency").unwrap();
    assert_eq!(header[0], "step");
    assert_eq!(rows.len(), 40);
    let s = json(&out.join("summary.json"));
    assert!(s["all_steps"]["bn_mean_dev"].as_f64().unwrap() > 0.0);

    let (code, out) = run(&e, &["profile", "--samples", "50000"], "prof");
    assert_eq!(code, 0);
    let (header, rows) = read_csv(&out.join("profile.csv"), "profile").unwrap();
    assert_eq!(header[header.len() - 2], "exceed_7");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][header.len() - 2], "0");
    let p1: f64 = rows[0][3].parse().unwrap();
    assert!((p1 + 2.326).abs() < 0.05);
}

#[test]
fn model_profile_respects_hooks() {
    let e = env();
    let (code, out) = run(
        &e,
        &["profile", "--source", "mnist", "--iters", "3", "--batch", "20", "--hooks", "conv2,fc84"],
        "mprof",
    );
    assert_eq!(code, 0);
    let (_, rows) = read_csv(&out.join("profile.csv"), "profile").unwrap();
    let layers: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(layers, ["conv2", "fc84"]);
    assert_eq!(run(&e, &["profile", "--source", "mnist", "--hooks", "fc9"], "bad").0, 2);
}

#[test]
fn landscape_and_ablation_outputs() {
    let e = env();
    let (code, out) = run(
        &e,
        &["landscape", "--arch", "mlp", "--iters", "5", "--batch", "10", "--probe-every", "2"],
        "land",
    );
    assert_eq!(code, 0);
    let (header, rows) = read_csv(&out.join("landscape.csv"), "landscape").unwrap();
    assert_eq!(header.len(), 4 + 4 + 4 + 4);
    assert_eq!(rows.len(), 2 * 2);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["norms"].as_array().unwrap().len(), 2);

    let (code, out) = run(&e, &["ablation", "--arch", "mlp", "--iters", "3", "--batch", "10", "--seeds", "2"], "abl");
    assert_eq!(code, 0);
    let (_, rows) = read_csv(&out.join("ablation.csv"), "ablation").unwrap();
    let placements: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(placements, ["fc256", "fc128", "all", "none"]);
    assert!(rows.iter().all(|r| r[4] == "2"));
}

#[test]
fn gradcheck_and_bench_commands() {
    let e = env();
    let (code, out) = run(&e, &["gradcheck", "--trials", "10", "--norm", "fgn"], "gc");
    assert_eq!(code, 0);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["passed"], true);
    let (_, rows) = read_csv(&out.join("gradcheck.csv"), "gradcheck").unwrap();
    assert_eq!(rows.len(), 10);

    let (code, out) = run(&e, &["bench", "--repeats", "1", "--sizes", "256,1024"], "bench");
    assert_eq!(code, 0);
    let (header, rows) = read_csv(&out.join("bench.csv"), "bench").unwrap();
    assert_eq!(header[4], "iqr_seconds");
    assert!(rows.iter().all(|r| r[4].is_empty()));
}
