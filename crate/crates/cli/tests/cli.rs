use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevkd_core::{generate_scene, RunConfig, SceneSample, StepRecord, Tensor};
use tempfile::TempDir;

fn bevkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevkd"))
        .args(args)
        .output()
        .expect("spawn bevkd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"{
    "grid": {"x_min": -16.0, "x_max": 16.0, "y_min": -16.0, "y_max": 16.0, "rows": 8, "cols": 8},
    "camera": {"channels": 8, "img_h": 4, "img_w": 8, "depth_bins": 8, "d_max": 17.0},
    "scene": {"half_range": 16.0, "n_objects": 2, "lidar_per_object": 30, "lidar_clutter": 30,
              "radar_per_object": 2, "radar_clutter": 2},
    "steps": 3,
    "seed": 11
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn with_overrides(extra: &[(&str, serde_json::Value)]) -> String {
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    for (k, x) in extra {
        v[*k] = x.clone();
    }
    v.to_string()
}

fn run_ok(config: &Path, out: &Path) {
    let o = bevkd(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn records(dir: &Path) -> Vec<StepRecord> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn zero_steps_writes_only_the_initial_record() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &with_overrides(&[("steps", 0.into())]));
    let out = dir.path().join("out");
    run_ok(&cfg, &out);
    let recs = records(&out);
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].step, 0);
    let line = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(line.trim())
        .unwrap()
        .keys()
        .cloned()
        .collect();
    for k in ["step", "det", "depth", "igfm", "swfd", "swrd", "ld", "total"] {
        assert!(keys.iter().any(|x| x == k), "missing {k}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&cfg, &a);
    run_ok(&cfg, &b);
    assert_eq!(records(&a).len(), 4);
    for f in [
        "metrics.jsonl",
        "F_camera.bin",
        "F_radar.bin",
        "F_fused.bin",
        "I_camera.bin",
        "I_radar.bin",
        "I_lidar.bin",
    ] {
        assert!(
            fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn run_dumps_have_grid_shapes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    run_ok(&cfg, &out);
    for (f, dims) in [
        ("F_camera.bin", vec![8, 8, 8]),
        ("F_radar.bin", vec![8, 8, 8]),
        ("F_fused.bin", vec![8, 8, 8]),
        ("I_camera.bin", vec![1, 8, 8]),
        ("I_radar.bin", vec![1, 8, 8]),
        ("I_lidar.bin", vec![1, 8, 8]),
    ] {
        let (t, _) = Tensor::load(out.join(f)).unwrap();
        assert_eq!(t.dims(), &dims[..], "{f}");
        assert!(t.is_finite());
    }
}

#[test]
fn out_dir_can_come_from_the_config() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("from_config");
    let text = with_overrides(&[("steps", 0.into()), ("out_dir", out.to_str().unwrap().into())]);
    let cfg = write_config(dir.path(), "c.json", &text);
    let o = bevkd(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(out.join("metrics.jsonl").exists());
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let typo = write_config(dir.path(), "typo.json", r#"{"weights": {"lamda3": 1.0}}"#);
    let broken = write_config(dir.path(), "broken.json", "{ not json");
    let invalid = write_config(dir.path(), "invalid.json", r#"{"lr": -0.1}"#);
    let missing = dir.path().join("missing.json");
    for cfg in [&typo, &broken, &invalid, &missing] {
        let o = bevkd(&["run", "--config", cfg.to_str().unwrap(), "--out", out]);
        assert_eq!(code(&o), 2, "{}", cfg.display());
        assert!(!o.stderr.is_empty());
    }
    let no_out = write_config(dir.path(), "no_out.json", "{}");
    assert_eq!(code(&bevkd(&["run", "--config", no_out.to_str().unwrap()])), 2);
}

#[test]
fn unwritable_outputs_exit_2() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let inside = blocker.join("sub");
    let cfg = write_config(dir.path(), "c.json", &with_overrides(&[("steps", 0.into())]));
    let o = bevkd(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        inside.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = bevkd(&[
        "gen-scene",
        "--seed",
        "0",
        "--out",
        inside.join("s.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_run_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &with_overrides(&[("lr", 1e300.into()), ("steps", 5.into())]),
    );
    let o = bevkd(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_oracles_passes_with_a_table() {
    let o = bevkd(&["check", "oracles", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("build_grid"));
    assert!(!text.contains("FAIL"));
    assert!(text.trim_end().ends_with("0 failed"));
}

#[test]
fn unknown_suite_exits_2() {
    assert_eq!(code(&bevkd(&["check", "everything"])), 2);
}

#[test]
fn check_gradients_reports_repeat() {
    let a = bevkd(&["check", "gradients", "--seed", "7"]);
    let b = bevkd(&["check", "gradients", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert!(a.stdout == b.stdout, "reports differ:\n{}\n{}", stdout(&a), stdout(&b));
}

#[test]
fn gen_scene_is_idempotent_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        fs::create_dir(d).unwrap();
        let out = d.join("scene.json");
        assert_eq!(
            code(&bevkd(&["gen-scene", "--seed", "0", "--out", out.to_str().unwrap()])),
            0
        );
    }
    for f in ["scene.json", "scene.json.camera.bin"] {
        assert!(
            fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let a = a.join("scene.json");
    let cfg = RunConfig::default();
    let want = generate_scene(0, &cfg.scene, &cfg.camera).unwrap();
    assert_eq!(SceneSample::load(&a).unwrap(), want);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    for k in ["radar", "lidar", "boxes"] {
        assert!(doc[k].is_array(), "{k}");
    }
}

#[test]
fn gen_scene_honors_object_count() {
    let dir = TempDir::new().unwrap();
    for n in [0usize, 1, 5] {
        let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
        v["scene"]["n_objects"] = n.into();
        let cfg = write_config(dir.path(), "c.json", &v.to_string());
        let out = dir.path().join(format!("s{n}.json"));
        let o = bevkd(&[
            "gen-scene",
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        assert_eq!(SceneSample::load(&out).unwrap().boxes.len(), n);
    }
}

#[test]
fn dump_writes_named_tensors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("fused.bin");
    let o = bevkd(&[
        "dump",
        "--what",
        "F_fused",
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(Tensor::load(&out).unwrap().0.dims(), &[8, 8, 8]);
    let o = bevkd(&["dump", "--what", "nothing", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn teacher_features_load_from_a_dump() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let cfg = cfg.to_str().unwrap();
    let feats = dir.path().join("f_lidar.bin");
    let feats = feats.to_str().unwrap();
    assert_eq!(
        code(&bevkd(&["dump", "--what", "F_lidar", "--out", feats, "--config", cfg])),
        0
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(Path::new(cfg), &a);
    let o = bevkd(&[
        "run",
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--teacher-dump",
        feats,
    ]);
    assert_eq!(code(&o), 0);
    let (ra, rb) = (records(&a), records(&b));
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert!(
            (x.total - y.total).abs() <= 1e-5 * x.total.abs(),
            "{} vs {}",
            x.total,
            y.total
        );
    }

    let wrong = dir.path().join("wrong.bin");
    Tensor::zeros(&[3, 8, 8])
        .save(&wrong, bevkd_core::Precision::F64)
        .unwrap();
    let o = bevkd(&[
        "run",
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--teacher-dump",
        wrong.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}
