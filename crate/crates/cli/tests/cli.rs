use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use wastebot::image::{write_png_gray16, Image};
use wastebot_cli::RunManifest;

fn wastebot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wastebot"))
        .args(args)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    wastebot(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["sort-everything"]), 1);
    assert_eq!(code(&["bands", "--nonsense"]), 1);
    // Artifact-producing commands insist on --out.
    assert_eq!(code(&["plant", "collect"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope.msc1");
    assert_eq!(
        code(&[
            "classify",
            "train",
            "--scene",
            p(&missing),
            "--labels",
            p(&missing),
            "--out",
            p(&d.join("m"))
        ]),
        2
    );
    let commands = d.join("commands.json");
    std::fs::write(&commands, "[0.5, 2.0]").unwrap();
    assert_eq!(
        code(&["plant", "run", "--commands", p(&commands), "--out", p(&d.join("r"))]),
        2
    );
    let broken = d.join("broken.json");
    std::fs::write(&broken, "{").unwrap();
    assert_eq!(
        code(&["controller", "run", "--config", p(&broken), "--out", p(&d.join("c"))]),
        2
    );
}

#[test]
fn algorithmic_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let flat = d.join("flat.png");
    let mut png = Vec::new();
    write_png_gray16(&Image::from_fn(64, 64, |_, _| 0.5), &mut png).unwrap();
    std::fs::write(&flat, png).unwrap();
    let out = wastebot(&[
        "register",
        "--uv",
        p(&flat),
        "--visnir",
        p(&flat),
        "--swir",
        p(&flat),
        "--out",
        p(&d.join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("registration failed"));

    let log = d.join("log");
    assert_eq!(code(&["plant", "collect", "--duration", "3", "--out", p(&log)]), 0);
    let log_csv = log.join("log.csv");
    let check = |tol: &str, out: &str| {
        code(&[
            "predictor",
            "gradcheck",
            "--log",
            p(&log_csv),
            "--start",
            "100",
            "--tolerance",
            tol,
            "--out",
            p(&d.join(out)),
        ])
    };
    assert_eq!(check("1e-4", "g_ok"), 0);
    assert_eq!(check("0", "g_strict"), 3);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("g_strict/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn manifest_hashes_outputs_and_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(
            code(&["plant", "collect", "--duration", "2", "--seed", "3", "--out", p(&out)]),
            0
        );
        out
    };
    let (a, b) = (run("a"), run("b"));
    let m = manifest(&a);
    assert_eq!(m.seed, Some(3));
    assert_eq!(m.command[1..4], ["plant", "collect", "--duration"]);
    assert_eq!(m.tool_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["log.csv", "log.csv.json"]);
    for (name, hash) in &m.outputs {
        let bytes = std::fs::read(a.join(name)).unwrap();
        assert_eq!(*hash, format!("{:x}", Sha256::digest(&bytes)));
        assert_eq!(
            bytes,
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }
    let rows = std::fs::read_to_string(a.join("log.csv")).unwrap().lines().count();
    assert_eq!(rows, 201);
}

#[test]
fn config_file_overlays_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gains = d.join("gains.json");
    std::fs::write(&gains, r#"{"kp": 0.0, "ki": 0.0, "kd": 0.0}"#).unwrap();
    fn args(out: &str) -> Vec<&str> {
        vec!["controller", "run", "--from", "-0.3", "--to", "0.3", "--out", out]
    }
    let base = d.join("base");
    let off = d.join("off");
    assert_eq!(code(&args(p(&base))), 0);
    let mut with_config = args(p(&off));
    with_config.extend(["--config", p(&gains)]);
    assert_eq!(code(&with_config), 0);

    let commands = |dir: &Path| -> Vec<f64> {
        std::fs::read_to_string(dir.join("tracking.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    };
    assert!(commands(&base).iter().any(|u| *u != 0.0));
    assert!(commands(&off).iter().all(|u| *u == 0.0));
    let m = manifest(&off);
    assert_eq!(m.config_files, [p(&gains)]);
    assert!(m.inputs.contains_key(p(&gains)));
}

#[test]
fn scene_train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = |seed: &str, out: &str| {
        let out = d.join(out);
        assert_eq!(
            code(&["synth-scene", "--size", "64", "--seed", seed, "--out", p(&out)]),
            0
        );
        out
    };
    let (s1, s2) = (scene("1", "s1"), scene("2", "s2"));
    let model = d.join("model");
    let train = wastebot(&[
        "classify",
        "train",
        "--scene",
        p(&s1.join("scene.msc1")),
        "--labels",
        p(&s1.join("labels.json")),
        "--out",
        p(&model),
    ]);
    assert!(train.status.success());
    assert!(String::from_utf8_lossy(&train.stdout).starts_with("f1-score of "));
    let eval = d.join("eval");
    assert_eq!(
        code(&[
            "classify",
            "eval",
            "--model",
            p(&model.join("model.json")),
            "--scene",
            p(&s2.join("scene.msc1")),
            "--labels",
            p(&s2.join("labels.json")),
            "--out",
            p(&eval),
        ]),
        0
    );
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["macro_f1"].as_f64().unwrap() >= 0.9, "{metrics}");
    let infer = d.join("infer");
    assert_eq!(
        code(&[
            "classify",
            "infer",
            "--model",
            p(&model.join("model.json")),
            "--scene",
            p(&s2.join("scene.msc1")),
            "--out",
            p(&infer)
        ]),
        0
    );
    for f in [
        "labels.png",
        "confidence.png",
        "legend.json",
        "histogram.json",
        "manifest.json",
    ] {
        assert!(infer.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn library_entry_point_matches_binary() {
    assert_eq!(wastebot_cli::run(["wastebot", "bands"]), 0);
    assert_eq!(wastebot_cli::run(["wastebot", "bands", "--seed", "x"]), 1);
}
