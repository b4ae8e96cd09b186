use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catoptric"))
        .args(args)
        .env_remove("CATOPTRIC_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mirror_count(dir: &Path) -> usize {
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("template.json")).unwrap()).unwrap();
    t["mirrors"].as_array().unwrap().len()
}

#[test]
fn simulate_defaults_to_25_mirrors() {
    let d = tempdir().unwrap();
    let cap = d.path().join("cap");
    let out = ok(&["simulate", "--out", s(&cap)]);
    assert!(out.contains("25 mirrors"), "{out}");
    assert_eq!(mirror_count(&cap), 25);
    for f in [
        "image.png",
        "mask.png",
        "valid.png",
        "index.png",
        "depth.pfm",
        "normal.pfm",
        "calibration.json",
        "correspondences.json",
    ] {
        assert!(cap.join(f).exists(), "{f}");
    }
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let d = tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "simulate",
            "--out",
            s(dir),
            "--mirrors",
            "5",
            "--sigma",
            "1.0",
            "--seed",
            "3",
        ]);
    }
    assert_eq!(mirror_count(&a), 5);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let ideal = fs::read(a.join("template.json")).unwrap();
    let truth = fs::read(a.join("template_truth.json")).unwrap();
    assert_ne!(ideal, truth);
}

#[test]
fn calibrate_recovers_pose_and_rejects_too_few_points() {
    let d = tempdir().unwrap();
    let cap = d.path().join("cap");
    ok(&["simulate", "--out", s(&cap), "--mirrors", "1"]);
    let calib = d.path().join("calib.json");
    ok(&[
        "calibrate",
        "--correspondences",
        s(&cap.join("correspondences.json")),
        "--out",
        s(&calib),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&calib).unwrap()).unwrap();
    assert!(v["rmse_px"].as_f64().unwrap() < 1e-6);

    let mut file: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cap.join("correspondences.json")).unwrap()).unwrap();
    file["points"].as_array_mut().unwrap().truncate(3);
    let few = d.path().join("few.json");
    fs::write(&few, file.to_string()).unwrap();
    let out = run(&["calibrate", "--correspondences", s(&few)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_and_bad_config_exit_codes() {
    let d = tempdir().unwrap();
    let out = run(&["restore", "--capture", s(&d.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["simulate", "--out", s(d.path()), "--mirrors", "4"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = d.path().join("c.json");
    fs::write(&cfg, r#"{"sead": 1}"#).unwrap();
    let out = run(&["simulate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sead"));
    let out = run(&["eval", "--rendered", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_dir_falls_back_to_environment() {
    let d = tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_catoptric"))
        .args(["simulate", "--mirrors", "1"])
        .env("CATOPTRIC_OUT", d.path().join("env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.path().join("env/image.png").exists());
}

#[test]
fn train_render_eval_pipeline() {
    let d = tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    ok(&["simulate", "--out", s(&p("cap")), "--mirrors", "7"]);
    ok(&[
        "calibrate",
        "--correspondences",
        s(&p("cap/correspondences.json")),
        "--out",
        s(&p("cap/calibration.json")),
    ]);
    let out = ok(&["restore", "--capture", s(&p("cap")), "--out", s(&p("rays.bin"))]);
    assert!(out.contains("restored"));

    let cfg = p("config.json");
    fs::write(
        &cfg,
        r#"{"train": {"batch_rays": 512, "n_coarse": 16, "n_fine": 8},
            "render": {"n_coarse": 16, "n_fine": 8, "width": 32, "height": 24},
            "views": {"azimuth_steps": 2, "elevation_steps": 1, "width": 32, "height": 24, "focal_px": 32}}"#,
    )
    .unwrap();
    let c = s(&cfg);
    let (rays, template, train_dir) = (p("rays.bin"), p("cap/template.json"), p("train"));
    let train = [
        "train",
        "--config",
        c,
        "--rays",
        s(&rays),
        "--template",
        s(&template),
        "--out",
        s(&train_dir),
        "--epochs",
        "1",
    ];
    let log = ok(&train);
    assert!(log.contains("epoch   0"));
    let csv = fs::read_to_string(p("train/loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,l_c,l_v,l_g,l_total,tau"));
    assert!(p("train/epoch-000.ckpt").exists());

    let mut resume = train.to_vec();
    let ck = p("train/field.ckpt");
    let out2 = p("train2");
    resume.extend(["--resume", s(&ck)]);
    resume[8] = s(&out2);
    resume[10] = "2";
    let log = ok(&resume);
    assert!(log.contains("epoch   1") && !log.contains("epoch   0"), "{log}");

    ok(&[
        "render",
        "--config",
        c,
        "--checkpoint",
        s(&p("train2/field.ckpt")),
        "--out",
        s(&p("render")),
        "--depth",
    ]);
    for f in ["view-000.png", "view-001.png", "depth-000.pfm"] {
        assert!(p("render").join(f).exists(), "{f}");
    }

    let table = ok(&[
        "eval",
        "--config",
        c,
        "--checkpoint",
        s(&p("train2/field.ckpt")),
        "--out",
        s(&p("eval")),
    ]);
    assert!(table.contains("checkpoint"));
    let metrics = fs::read_to_string(p("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 + 1);
    let psnr: f64 = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(7)
        .unwrap()
        .parse()
        .unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);

    let table = ok(&[
        "eval",
        "--rendered",
        s(&p("render")),
        "--reference",
        s(&p("render")),
        "--out",
        s(&p("eval2")),
    ]);
    assert!(table.contains("99.000"), "{table}");
}
