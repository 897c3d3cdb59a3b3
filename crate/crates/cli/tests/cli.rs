use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn egrnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egrnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every file under `dir` with its contents, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

const SMOKE_SPEC: &str = r#"{
  "classes": [
    {"name": "slow", "carrier_freq_hz": 1600, "impulse_rate_hz": 200,
     "modulation_depth": 0.6, "decay_constant": 0.002, "amplitude": 1.0},
    {"name": "fast", "carrier_freq_hz": 3200, "impulse_rate_hz": 400,
     "modulation_depth": 0.6, "decay_constant": 0.002, "amplitude": 1.0}
  ],
  "sample_rate_hz": 12800,
  "sample_length": 64,
  "samples_per_class": 40,
  "rng_seed": 3
}"#;

const SMOKE_CONFIG: &str = r#"{
  "manifest": "data",
  "snr_db": [0],
  "trials": 2,
  "epochs": 3,
  "rng_seed": 11,
  "record_timing": false
}"#;

/// A temp dir holding the smoke spec, config and a synthesized dataset.
fn smoke_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SMOKE_SPEC).unwrap();
    fs::write(dir.path().join("exp.json"), SMOKE_CONFIG).unwrap();
    let out = egrnet(
        dir.path(),
        &["synth", "--spec", "spec.json", "--out", "data"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) {
    let mut text = String::from("sample_rate_hz,1000\n");
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn synth_writes_dataset_and_is_reproducible() {
    let ws = smoke_workspace();
    let again = egrnet(
        ws.path(),
        &["synth", "--spec", "spec.json", "--out", "again"],
    );
    assert_eq!(code(&again), 0);
    let data = snapshot(&ws.path().join("data"));
    assert!(data.contains_key(Path::new("manifest.json")));
    assert!(data.contains_key(Path::new("class_0.f32le")));
    assert_eq!(data, snapshot(&ws.path().join("again")));
    assert!(stdout(&again).contains("2 classes"));
}

#[test]
fn synth_rejects_nyquist_violation() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        SMOKE_SPEC.replace("3200", "7000"),
    )
    .unwrap();
    let out = egrnet(
        dir.path(),
        &["synth", "--spec", "spec.json", "--out", "data"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Nyquist"), "{}", stderr(&out));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn convert_renders_constant_and_periodic_samples() {
    let dir = tempfile::tempdir().unwrap();
    let sine: Vec<f64> = (0..4096)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 8.0).sin())
        .collect();
    write_csv(&dir.path().join("flat.csv"), &[vec![2.5; 4096]]);
    write_csv(&dir.path().join("sine.csv"), &[sine]);
    let out = egrnet(
        dir.path(),
        &[
            "import", "--csv", "flat.csv", "--csv", "sine.csv", "--out", "data",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let flat = egrnet(
        dir.path(),
        &[
            "convert",
            "--manifest",
            "data",
            "--class",
            "0",
            "--index",
            "0",
            "--out",
            "flat",
        ],
    );
    assert_eq!(code(&flat), 0, "{}", stderr(&flat));
    for image in ["rsm.pgm", "egr.pgm"] {
        let bytes = fs::read(dir.path().join("flat").join(image)).unwrap();
        let header = b"P5\n64 64\n255\n".len();
        let pixels = &bytes[header..];
        assert_eq!(pixels.len(), 64 * 64);
        assert!(
            pixels.iter().all(|&p| p == pixels[0]),
            "{image} is not uniform"
        );
    }

    let sine = egrnet(
        dir.path(),
        &[
            "convert",
            "--manifest",
            "data",
            "--class",
            "1",
            "--index",
            "0",
            "--emit",
            "egr",
            "--out",
            "sine",
        ],
    );
    assert_eq!(code(&sine), 0, "{}", stderr(&sine));
    assert!(!dir.path().join("sine/rsm.pgm").exists());
    let profile = fs::read_to_string(dir.path().join("sine/stripe_profile.csv")).unwrap();
    let lags: Vec<(usize, f64)> = profile
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    let best = lags[1..=32]
        .iter()
        .map(|l| l.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let argmax = lags[1..=32]
        .iter()
        .find(|l| l.1 >= best - 1e-9 * best.abs())
        .unwrap()
        .0;
    assert_eq!(argmax, 8);

    let bad = egrnet(
        dir.path(),
        &[
            "convert",
            "--manifest",
            "data",
            "--class",
            "1",
            "--index",
            "5",
            "--out",
            "bad",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn smoke_train_then_eval_reproduces_accuracy() {
    let ws = smoke_workspace();
    let start = Instant::now();
    let train = egrnet(
        ws.path(),
        &["train", "--config", "exp.json", "--out", "run"],
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    assert!(elapsed < 60.0, "smoke training took {elapsed:.1}s");
    assert!(stderr(&train).contains("epoch 1/3"));
    let run = ws.path().join("run");
    for f in [
        "model.bin",
        "model.json",
        "results.csv",
        "curves.csv",
        "confusion.csv",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let results = fs::read_to_string(run.join("results.csv")).unwrap();
    let trained: f64 = results
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();

    // the saved config resolves its manifest from anywhere
    let eval = egrnet(
        ws.path(),
        &[
            "eval",
            "--config",
            "run/config.json",
            "--checkpoint",
            "run/model.bin",
            "--out",
            "eval",
        ],
    );
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path().join("eval/eval.json")).unwrap())
            .unwrap();
    assert_eq!(report["accuracy_pct"].as_f64().unwrap(), trained);
}

#[test]
fn flags_override_config_fields() {
    let ws = smoke_workspace();
    let out = egrnet(
        ws.path(),
        &[
            "train",
            "--config",
            "exp.json",
            "--epochs",
            "1",
            "--variant",
            "cnn-rsm",
            "--snr",
            "-3",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path().join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["variant"], "cnn-rsm");
    assert_eq!(cfg["snr_db"][0], -3.0);
    assert!(stderr(&out).contains("cnn-rsm snr=-3"));
}

#[test]
fn missing_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = egrnet(
        dir.path(),
        &["train", "--manifest", "nowhere", "--out", "run"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere"));
    let usage = egrnet(dir.path(), &["train", "--out", "run"]);
    assert_eq!(code(&usage), 2);
    let unknown = egrnet(dir.path(), &["frobnicate"]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn sweep_outputs_are_bytewise_deterministic() {
    let ws = smoke_workspace();
    for out in ["a", "b"] {
        let r = egrnet(
            ws.path(),
            &[
                "sweep", "--config", "exp.json", "--epochs", "2", "--out", out,
            ],
        );
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let (a, b) = (
        snapshot(&ws.path().join("a")),
        snapshot(&ws.path().join("b")),
    );
    assert!(a.contains_key(Path::new("checkpoints/snr_0_trial_1.bin")));
    assert_eq!(a, b);
}

#[test]
fn commands_write_only_inside_out() {
    let ws = smoke_workspace();
    let before = snapshot(ws.path());
    let runs: [&[&str]; 5] = [
        &[
            "train", "--config", "exp.json", "--epochs", "1", "--out", "o/train",
        ],
        &[
            "sweep", "--config", "exp.json", "--epochs", "1", "--trials", "1", "--out", "o/sweep",
        ],
        &[
            "ablate", "--config", "exp.json", "--epochs", "1", "--trials", "1", "--out", "o/ablate",
        ],
        &["separability", "--config", "exp.json", "--out", "o/sep"],
        &[
            "convert",
            "--manifest",
            "data",
            "--class",
            "0",
            "--index",
            "1",
            "--out",
            "o/convert",
        ],
    ];
    for args in runs {
        let r = egrnet(ws.path(), args);
        assert_eq!(code(&r), 0, "{args:?}: {}", stderr(&r));
    }
    let after = snapshot(ws.path());
    for (path, bytes) in &after {
        if !path.starts_with("o") {
            assert_eq!(
                before.get(path),
                Some(bytes),
                "{} changed outside --out",
                path.display()
            );
        }
    }
    assert!(after.keys().any(|p| p.starts_with("o/ablate/cnn-rsm")));
    assert!(after.contains_key(Path::new("o/ablate/ablation.csv")));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = egrnet(dir.path(), &["gradcheck", "--scope", "all", "--out", "gc"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let text = stdout(&ok);
    for op in [
        "conv2d",
        "batchnorm",
        "layernorm",
        "relu",
        "channel_gram",
        "dense",
        "gcb",
        "two-block net",
    ] {
        assert!(text.contains(op), "{op} missing from report");
    }
    assert!(dir.path().join("gc/gradcheck.json").exists());

    let layer = egrnet(dir.path(), &["gradcheck", "--scope", "layer"]);
    assert_eq!(code(&layer), 0);
    assert!(stdout(&layer).contains("max rel"));

    let bad = egrnet(
        dir.path(),
        &["gradcheck", "--scope", "layer", "--inject-fault"],
    );
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn inspect_reports_canonical_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = egrnet(
        dir.path(),
        &["inspect", "--variant", "egr-net", "--out", "i"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["classifier_width"], 384);
    assert_eq!(
        doc["spatial_trace"],
        serde_json::json!([64, 64, 64, 32, 16])
    );
    let params = doc["parameter_count"].as_u64().unwrap();
    assert!((350_000..=550_000).contains(&params));
    assert!(dir.path().join("i/inspect.json").exists());
}

#[test]
fn shipped_configs_run() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let spec = configs.join("smoke-spec.json");
    let out = egrnet(dir.path(), &["synth", "--spec", spec.to_str().unwrap(), "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = configs.join("smoke.json");
    let out = egrnet(
        dir.path(),
        &["train", "--config", config.to_str().unwrap(), "--manifest", "data", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let full: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs.join("synthetic-4class.json")).unwrap()).unwrap();
    assert_eq!(full["sample_length"], 4096);
    let schedule: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs.join("paper-schedule.json")).unwrap()).unwrap();
    assert_eq!(schedule["epochs"], 50);
}
