use std::path::Path;
use std::process::{Command, Output};

use cgcv::io::flo::read_flo;

fn cgcv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgcv")).args(args).output().expect("spawn cgcv")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn synth(dir: &Path, spec: &str) -> std::path::PathBuf {
    std::fs::write(dir.join("spec.txt"), spec).unwrap();
    let data = dir.join("data");
    let out = cgcv(&["synth", "--spec", &s(&dir.join("spec.txt")), "--out-dir", &s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn gradcheck_seed_one_passes() {
    let out = cgcv(&["gradcheck", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 20);
    assert!(text.lines().all(|l| l.ends_with("PASS")), "{text}");
}

#[test]
fn usage_errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["flow", "a.ppm", "b.ppm", "--out", "x.flo", "--bogus"],
        vec!["flow", "missing_ref.ppm", "missing_tgt.ppm", "--out", "x.flo"],
        vec!["frobnicate"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_cgcv")).current_dir(dir.path()).args(&args).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
}

#[test]
fn flow_baseline_path_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "width = 32\nheight = 24\nseed = 1\nmotion = translation 2 1\n");
    let flo = dir.path().join("f.flo");
    let out = cgcv(&[
        "flow",
        &s(&data.join("0000_ref.ppm")),
        &s(&data.join("0000_tgt.ppm")),
        "--out",
        &s(&flo),
        "--gate",
        "none",
        "--lift",
        "off",
        "--iters",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f = read_flo(std::fs::File::open(&flo).unwrap()).unwrap();
    assert_eq!((f.height(), f.width()), (24, 32));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "gate = nonsense\n").unwrap();
    let bad = cgcv(&["--config", &s(&cfg), "gradcheck", "--samples", "1"]);
    assert!(!bad.status.success());
    let ok = cgcv(&["--config", &s(&cfg), "gradcheck", "--gate", "none", "--samples", "1"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn volume_and_features_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "width = 32\nheight = 32\nseed = 2\nmotion = translation 0 0\nduplicate_patch = on\n");
    let (r, t) = (s(&data.join("0000_ref.ppm")), s(&data.join("0000_tgt.ppm")));
    let pgm = dir.path().join("plane.pgm");
    let dump = dir.path().join("v.cgcv");
    let out = cgcv(&[
        "volume", &r, &t, "--query", "1,2", "--which", "A", "--out", &s(&pgm), "--dump", &s(&dump), "--init", "random",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
    assert!(std::fs::read(&dump).unwrap().starts_with(b"CGCV"));

    let oob = cgcv(&["volume", &r, &t, "--query", "9,0", "--out", &s(&pgm)]);
    assert!(!oob.status.success());

    let feat = dir.path().join("feat");
    let out = cgcv(&["features", &r, "--which", "inp", "--out-dir", &s(&feat), "--init", "random"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&feat).unwrap().count(), 128);
}

#[test]
fn train_toy_checkpoint_feeds_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "width = 32\nheight = 32\nseed = 4\nmotion = random-translation 3\ncount = 2\n");
    let ckpt = dir.path().join("w.cgck");
    let out = cgcv(&["train-toy", "--data", &s(&data), "--epochs", "2", "--lr", "0.05", "--out", &s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epoch 1 loss"), "{text}");
    assert!(std::fs::read(&ckpt).unwrap().starts_with(b"CGCK"));

    let flo = dir.path().join("f.flo");
    let out = cgcv(&[
        "flow",
        &s(&data.join("0001_ref.ppm")),
        &s(&data.join("0001_tgt.ppm")),
        "--out",
        &s(&flo),
        "--ckpt",
        &s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_flo(std::fs::File::open(&flo).unwrap()).is_ok());
}
