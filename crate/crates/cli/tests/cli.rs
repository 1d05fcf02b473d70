use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bcdnet_core::image::read_image;
use bcdnet_core::phantom::DESK_A0;
use bcdnet_core::physics::{direct_inversion, DecompPhysics};
use bcdnet_core::image::AttenuationPair;

fn bcdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcdnet"))
        .args(args)
        .env_remove("BCDNET_THREADS")
        .output()
        .expect("spawn bcdnet")
}

fn ok(args: &[&str]) -> String {
    let out = bcdnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantom(dir: &Path, seed: u64, size: usize) {
    ok(&["phantom", "--seed", &seed.to_string(), "--size", &size.to_string(), "--out", p(dir)]);
}

fn small_config(root: &Path, seed: u64) -> std::path::PathBuf {
    for s in [1, 2] {
        phantom(&root.join(format!("p{s}")), s, 32);
    }
    let cfg = root.join("cfg.json");
    let text = format!(
        r#"{{"model": {{"variant": "distinct_cross", "side": 2, "k": 2, "iterations": 2, "beta": 1000,
            "train": {{"batch_size": 32, "epochs": 2, "lr0": 0.001, "alpha_init": [-1.2, -1.2], "seed": {seed}}}}},
            "pairs": ["p1", "p2"]}}"#
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn phantom_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), 3, 48);
    for f in ["water.matf", "bone.matf", "y_high.matf", "y_low.matf", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let water = read_image(dir.path().join("water.matf")).unwrap();
    assert_eq!((water.width(), water.height()), (48, 48));
}

#[test]
fn phantom_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    phantom(a.path(), 9, 32);
    phantom(b.path(), 9, 32);
    for f in ["water.matf", "bone.matf", "y_high.matf", "y_low.matf"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{not json").unwrap();
    let out = bcdnet(&["phantom", "--spec", p(&spec), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_reports_missing_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"variant": "distinct_cross", "side": 2, "k": 2, "iterations": 1, "beta": 10,
            "train": {"batch_size": 8, "epochs": 1, "lr0": 0.001, "alpha_init": [-1, -1], "seed": 0}},
            "pairs": ["nowhere"]}"#,
    )
    .unwrap();
    let out = bcdnet(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn train_decompose_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 5);
    let first = ok(&["train", "--config", p(&cfg), "--out", p(&root.join("m1"))]);
    let second = ok(&["train", "--config", p(&cfg), "--out", p(&root.join("m2"))]);
    assert!(first.starts_with("model "));
    assert_eq!(first, second);
    assert_eq!(
        fs::read(root.join("m1/model.bcdn")).unwrap(),
        fs::read(root.join("m2/model.bcdn")).unwrap()
    );
    for f in ["curve_iter1.csv", "curve_iter2.csv", "training_rmse.csv", "config.json"] {
        assert!(root.join("m1").join(f).exists(), "{f} missing");
    }

    phantom(&root.join("test"), 50, 32);
    let model = root.join("m1/model.bcdn");
    ok(&["decompose", "--model", p(&model), "--input", p(&root.join("test")), "--emit-png", "--out", p(&root.join("d"))]);
    for f in ["water.matf", "bone.matf", "water.png", "bone.png", "trace.csv"] {
        assert!(root.join("d").join(f).exists(), "{f} missing");
    }

    // Zero regularization reduces to direct inversion.
    ok(&["decompose", "--model", p(&model), "--input", p(&root.join("test")), "--beta", "0", "--out", p(&root.join("d0"))]);
    let y = AttenuationPair::new(
        read_image(root.join("test/y_high.matf")).unwrap(),
        read_image(root.join("test/y_low.matf")).unwrap(),
    )
    .unwrap();
    let physics = DecompPhysics::from_noise_sigmas(DESK_A0, 2.5e-3, 5.8e-3).unwrap();
    let (dw, _) = direct_inversion(&y, &physics).unwrap();
    let w0 = read_image(root.join("d0/water.matf")).unwrap();
    for (a, b) in w0.data().iter().zip(dw.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    let csv = ok(&[
        "eval",
        "--truth",
        p(&root.join("test")),
        "--method",
        &format!("truth={}", p(&root.join("test"))),
        "--method",
        &format!("bcdnet={}", p(&root.join("d"))),
    ]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,rmse_water_1e-3_g_cm3,rmse_bone_1e-3_g_cm3"));
    assert_eq!(lines.next(), Some("truth,0.000,0.000"));
    assert!(lines.next().unwrap().starts_with("bcdnet,"));

    let strict = bcdnet(&[
        "eval",
        "--truth",
        p(&root.join("test")),
        "--method",
        &format!("di={}", p(&root.join("d0"))),
        "--max-water",
        "1",
    ]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn decompose_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 2);
    ok(&["train", "--config", p(&cfg), "--out", p(&root.join("m"))]);
    ok(&["--threads", "1", "train", "--config", p(&cfg), "--out", p(&root.join("m1"))]);
    ok(&["--threads", "3", "train", "--config", p(&cfg), "--out", p(&root.join("m3"))]);
    let m1 = fs::read(root.join("m1/model.bcdn")).unwrap();
    assert_eq!(m1, fs::read(root.join("m3/model.bcdn")).unwrap());
    assert_eq!(m1, fs::read(root.join("m/model.bcdn")).unwrap());

    let model = root.join("m/model.bcdn");
    for t in ["1", "4"] {
        ok(&["--threads", t, "decompose", "--model", p(&model), "--input", p(&root.join("p1")), "--out", p(&root.join(format!("d{t}")))]);
    }
    assert_eq!(
        fs::read(root.join("d1/water.matf")).unwrap(),
        fs::read(root.join("d4/water.matf")).unwrap()
    );
}

#[test]
fn baseline_ep_zero_beta_is_direct_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    phantom(&root.join("in"), 4, 24);
    ok(&[
        "baseline-ep",
        "--input",
        p(&root.join("in")),
        "--beta-water",
        "0",
        "--beta-bone",
        "0",
        "--iters",
        "20",
        "--out",
        p(&root.join("ep")),
    ]);
    assert!(root.join("ep/cost.csv").exists());
    let y = AttenuationPair::new(
        read_image(root.join("in/y_high.matf")).unwrap(),
        read_image(root.join("in/y_low.matf")).unwrap(),
    )
    .unwrap();
    let physics = DecompPhysics::from_noise_sigmas(DESK_A0, 2.5e-3, 5.8e-3).unwrap();
    let (dw, db) = direct_inversion(&y, &physics).unwrap();
    let ew = read_image(root.join("ep/water.matf")).unwrap();
    let eb = read_image(root.join("ep/bone.matf")).unwrap();
    for (a, b) in ew.data().iter().zip(dw.data()).chain(eb.data().iter().zip(db.data())) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn verify_passes() {
    let out = ok(&["verify", "--trials", "10"]);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}
