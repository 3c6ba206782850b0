use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use layervid::compositor::render_frame;
use layervid::trainer::{load_model, save_model, Trainer};
use layervid::video_io::{quantize, read_manifest, read_png};
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_layervid")).args(args).env("RUST_LOG", "warn").output().unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8_lossy(&out.stdout).into(),
        stderr: String::from_utf8_lossy(&out.stderr).into(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = run(args);
    assert_eq!(r.code, 0, "{:?} failed: {}", args, r.stderr);
    r
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, scene: &str, frames: usize) -> PathBuf {
    let out = dir.join(format!("{}_{}", scene, frames));
    ok(&["synth", "--scene", scene, "--frames", &frames.to_string(), "--size", "16x16", "--seed", "7", "--out", s(&out)]);
    out
}

const TINY: [&str; 14] = [
    "--frame-width", "12", "--trunk-layers", "1", "--head-layers", "1", "--velocity-width", "6",
    "--velocity-layers", "1", "--batch", "128", "--epochs", "1",
];

fn train(dir: &Path, scene: &Path, extra: &[&str]) -> (PathBuf, Vec<Value>) {
    let model = dir.join(format!("{}.lvm", scene.file_name().unwrap().to_str().unwrap()));
    let manifest = scene.join("train/manifest.json");
    let mut args = vec!["train", "--frames", s(&manifest), "--out", s(&model)];
    args.extend(TINY);
    args.extend(extra);
    if !extra.contains(&"--layers") {
        args.extend(["--layers", "2"]);
    }
    ok(&args);
    let log = fs::read_to_string(format!("{}.log.jsonl", model.display())).unwrap();
    (model, log.lines().map(|l| serde_json::from_str(l).unwrap()).collect())
}

#[test]
fn help_exits_zero_and_shows_defaults() {
    assert_eq!(run(&["--help"]).code, 0);
    for sub in ["synth", "train", "interpolate", "eval", "verify"] {
        let r = run(&[sub, "--help"]);
        assert_eq!(r.code, 0, "{}", sub);
        assert!(r.stdout.contains("--"), "{}", sub);
    }
    let train = run(&["train", "--help"]).stdout;
    for flag in ["--layers", "--epochs", "--batch", "--gamma", "--seed", "--dt", "--lambda-v", "--lambda-i", "--alpha"] {
        assert!(train.contains(flag), "train help lacks {}", flag);
    }
    for default in ["[default: 4]", "[default: 400]", "[default: 4096]", "[default: 5]", "[default: 0.02, or 0.2"] {
        assert!(train.contains(default), "train help lacks {}", default);
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let r = run(&["synth", "--scene", "spiral", "--out", s(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("linear_square") && r.stderr.contains("two_movers") && r.stderr.contains("camouflage"));
    assert_eq!(run(&["synth", "--scene", "linear_square", "--size", "64by64", "--out", s(&out)]).code, 2);
    assert_eq!(run(&["synth", "--scene", "linear_square", "--frames", "1", "--out", s(&out)]).code, 2);
    assert_eq!(run(&["synth", "--scene", "linear_square", "--colour", "red", "--out", s(&out)]).code, 2);
    assert_eq!(run(&["frobnicate"]).code, 2);
    assert_eq!(run(&[]).code, 2);
}

#[test]
fn synth_writes_scene_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth", "--scene", "linear_square", "--frames", "9", "--size", "64x64", "--seed", "7", "--out", s(out)]);
    }
    let train = read_manifest(a.join("train/manifest.json")).unwrap();
    let held = read_manifest(a.join("held_out/manifest.json")).unwrap();
    assert_eq!(train.frames.len(), 9);
    assert_eq!(held.times(), vec![1.5, 3.5, 5.5, 7.5]);
    assert!(a.join("held_out/mask_00003.png").exists());
    for rel in ["train/frame_00004.png", "train/mask_00004.png", "held_out/frame_00002.png", "train/manifest.json", "scene.json"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel);
    }
}

#[test]
fn train_selects_regime_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let two = synth(dir.path(), "linear_square", 2);
    let (model, log) = train(dir.path(), &two, &[]);
    let h = &log[0];
    assert_eq!(h["regime"], "two_frame");
    assert_eq!((h["dt"].as_f64(), h["lambda_v"].as_f64(), h["lambda_i"].as_f64(), h["alpha"].as_f64()),
               (Some(0.2), Some(10.0), Some(10.0), Some(0.5)));
    // 512 samples in batches of 128.
    assert_eq!(log.len(), 1 + 4);
    assert!(log[1..].iter().all(|r| r["loss_total"].as_f64().unwrap().is_finite()));
    assert_eq!(load_model(&model).unwrap().epoch, 1);

    let nine = synth(dir.path(), "two_movers", 9);
    let (_, log) = train(dir.path(), &nine, &["--lambda-v", "0.5"]);
    let h = &log[0];
    assert_eq!(h["regime"], "multi_frame");
    assert_eq!((h["dt"].as_f64(), h["lambda_v"].as_f64(), h["lambda_i"].as_f64(), h["alpha"].as_f64()),
               (Some(0.02), Some(0.5), Some(0.01), Some(0.0)));

    let single = dir.path().join("single");
    fs::create_dir(&single).unwrap();
    let (model, log) = train(&single, &two, &["--layers", "1"]);
    assert_eq!(log[0]["num_layers"], 1);
    assert_eq!(load_model(&model).unwrap().model.num_layers(), 1);

    let r = run(&["train", "--frames", s(&two.join("train/manifest.json")), "--out", s(&dir.path().join("m")), "--gamma", "-1"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn interpolate_counts_times_and_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let two = synth(dir.path(), "linear_square", 2);
    let (m2, _) = train(dir.path(), &two, &[]);
    let three = synth(dir.path(), "camouflage", 3);
    let (m3, _) = train(dir.path(), &three, &[]);

    let out = dir.path().join("mid");
    ok(&["interpolate", "--model", s(&m2), "--factor", "2", "--out", s(&out)]);
    assert_eq!(read_manifest(out.join("manifest.json")).unwrap().times(), vec![0.5]);

    let out = dir.path().join("x4");
    ok(&["interpolate", "--model", s(&m3), "--factor", "4", "--out", s(&out), "--layer-views"]);
    assert_eq!(read_manifest(out.join("manifest.json")).unwrap().times(), vec![0.25, 0.5, 0.75, 1.25, 1.5, 1.75]);
    assert!(out.join("layer1_00005.png").exists() && out.join("visibility0_00000.png").exists());

    // An input timestamp renders the model's reconstruction of that frame.
    let out = dir.path().join("at");
    ok(&["interpolate", "--model", s(&m3), "--times", "1", "--out", s(&out)]);
    let model = load_model(&m3).unwrap().model;
    let (expected, _) = render_frame(&model, 0.0, &model.meta.grid()).unwrap();
    let got = read_png(out.join("frame_00000.png")).unwrap();
    for (g, e) in got.data.iter().zip(&expected.data) {
        assert_eq!(*g, quantize(*e) as f64 / 255.0);
    }

    let r = run(&["interpolate", "--model", s(&m3), "--times", "0.5,2.5", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("[0, 2]"), "{}", r.stderr);
    assert_eq!(run(&["interpolate", "--model", s(&m3), "--out", s(&out)]).code, 2);
    assert_eq!(run(&["interpolate", "--model", s(&m3), "--factor", "1", "--out", s(&out)]).code, 2);
    assert_eq!(run(&["interpolate", "--model", s(&m3), "--times", "abc", "--out", s(&out)]).code, 2);
    assert_eq!(run(&["interpolate", "--model", s(&dir.path().join("none.lvm")), "--factor", "2", "--out", s(&out)]).code, 1);
}

#[test]
fn eval_reports_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "two_movers", 9);
    let held = scene.join("held_out/manifest.json");
    let report = dir.path().join("r.json");

    ok(&["eval", "--pred", s(&scene.join("held_out")), "--gt", s(&held), "--report", s(&report)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["aggregate"]["aie"], 0.0);
    assert_eq!(v["aggregate"]["ssim"], 1.0);
    assert!(v["aggregate"]["psnr"].is_null());
    assert_eq!(v["aggregate"]["infinite"], true);
    assert_eq!(v["per_frame"].as_array().unwrap().len(), 4);

    let (model, _) = train(dir.path(), &scene, &[]);
    let pred = dir.path().join("pred");
    ok(&["interpolate", "--model", s(&model), "--times", "1.5,3.5,5.5,7.5", "--out", s(&pred)]);
    let r = ok(&["eval", "--pred", s(&pred.join("manifest.json")), "--gt", s(&held), "--report", s(&report)]);
    assert!(r.stdout.contains("mean"));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let frames = v["per_frame"].as_array().unwrap();
    for key in ["aie", "psnr", "ssim"] {
        let mean = frames.iter().map(|f| f[key].as_f64().unwrap()).sum::<f64>() / frames.len() as f64;
        assert!((v["aggregate"][key].as_f64().unwrap() - mean).abs() <= 1e-12, "{}", key);
    }

    let missing = dir.path().join("nowhere/manifest.json");
    let r = run(&["eval", "--pred", s(&pred), "--gt", s(&missing), "--report", s(&report)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("nowhere/manifest.json"), "{}", r.stderr);
    let r = run(&["eval", "--pred", s(&scene.join("train")), "--gt", s(&held), "--report", s(&report)]);
    assert_eq!(r.code, 2);
    let shifted = dir.path().join("shifted");
    ok(&["interpolate", "--model", s(&model), "--times", "1,3,5,7", "--out", s(&shifted)]);
    assert_eq!(run(&["eval", "--pred", s(&shifted), "--gt", s(&held), "--report", s(&report)]).code, 2);
}

#[test]
fn verify_passes_fresh_models_and_flags_folding_ones() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "linear_square", 2);
    let (trained, _) = train(dir.path(), &scene, &[]);
    let ckpt = load_model(&trained).unwrap();
    let clip_meta = ckpt.model.meta.clone();

    let fresh = dir.path().join("fresh.lvm");
    let mut config = ckpt.config.clone();
    config.epochs = 1;
    let clip = layervid::trainer::VideoClip {
        frames: vec![layervid::image::Image::filled(16, 16, 0.5); 2],
        normalized_times: vec![-1.0, 1.0],
        meta: clip_meta,
    };
    save_model(&fresh, &Trainer::new(&clip, config).unwrap().checkpoint()).unwrap();
    let report = dir.path().join("v.json");
    ok(&["verify", "--model", s(&fresh), "--report", s(&report)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["max_forward"], 0.0);
    assert_eq!(v["max_backward"], 0.0);
    assert_eq!(v["passed"], true);

    // A strong, strongly varying field folds under Euler steps.
    let mut wild = load_model(&fresh).unwrap();
    for name in ["velocity0.out.weight", "velocity1.out.weight"] {
        let id = wild.model.params.find(name).unwrap();
        for (i, x) in wild.model.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *x = if i % 2 == 0 { 6.0 } else { -5.0 };
        }
    }
    let wild_path = dir.path().join("wild.lvm");
    save_model(&wild_path, &wild).unwrap();
    let r = run(&["verify", "--model", s(&wild_path), "--dt-sweep", "--report", s(&report)]);
    assert_eq!(r.code, 3, "{}{}", r.stdout, r.stderr);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
    let layer = &v["layers"][0];
    assert!(layer["half_step"]["backward"].as_f64().unwrap() < layer["residuals"]["backward"].as_f64().unwrap());

    assert_eq!(run(&["verify", "--model", s(&dir.path().join("none.lvm")), "--report", s(&report)]).code, 1);
}
