use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualvdt::data::{load_csv, CsvSchema, SplitWindows};
use dualvdt::model::DualVdt;

const BIN: &str = env!("CARGO_BIN_EXE_dualvdt");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("DUALVDT_SEED")
        .output()
        .expect("spawn dualvdt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const CONFIG: &str = r#"
seed = 11
output_dir = "run"

[dataset]
synthetic = { n = 2, len = 120, seed = 4 }
lookback = 8
horizon = 4

[model]
encoder = { kind = "cnn", width = 8 }
score = { kind = "fc", width = 16 }
schedule = { steps = 6 }
latent_dim = 4
fusion_width = 8

[train]
epochs = 2
batch_size = 16
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["synth", "--n", "2", "--len", "120", "--seed", "4", "--out", "series.csv"]);
    let p = dir.path().to_path_buf();
    (dir, p)
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let (d, p) = setup();
    ok(&p, &["train", "--config", "run.toml"]);
    (d, p)
}

#[test]
fn train_writes_artifacts() {
    let (_d, p) = trained();
    let out = p.join("run");
    for f in ["model.ckpt", "loss.csv", "manifest-train.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".lock").exists());
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "epoch,recon,score,kl,total");
    assert_eq!(lines.len(), 3);
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let (_d, p) = setup();
    let bad = CONFIG.replace("[train]", "[train]\nfoo = 3");
    fs::write(p.join("bad.toml"), bad).unwrap();
    let o = run(&p, &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));
}

#[test]
fn bad_flag_exits_2() {
    let (_d, p) = setup();
    assert_eq!(run(&p, &["train", "--nope"]).status.code(), Some(2));
    assert_eq!(run(&p, &["ablate", "--config", "run.toml", "--dual", "maybe"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_runtime_error() {
    let (_d, p) = trained();
    let o = run(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "absent.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_loss_csv() {
    let (_d, p) = trained();
    ok(&p, &["train", "--config", "run.toml", "--out", "again"]);
    assert_eq!(
        fs::read(p.join("run/loss.csv")).unwrap(),
        fs::read(p.join("again/loss.csv")).unwrap()
    );
    ok(&p, &["train", "--config", "run.toml", "--out", "other", "--seed", "12"]);
    assert_ne!(
        fs::read(p.join("run/loss.csv")).unwrap(),
        fs::read(p.join("other/loss.csv")).unwrap()
    );
}

#[test]
fn seed_env_applies_only_without_config_seed() {
    let (_d, p) = setup();
    fs::write(p.join("noseed.toml"), CONFIG.replace("seed = 11\n", "")).unwrap();
    let o = Command::new(BIN)
        .args(["train", "--config", "noseed.toml"])
        .current_dir(&p)
        .env("DUALVDT_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success());
    ok(&p, &["train", "--config", "run.toml", "--out", "cfg"]);
    assert_eq!(fs::read(p.join("run/loss.csv")).unwrap(), fs::read(p.join("cfg/loss.csv")).unwrap());
}

#[test]
fn held_lock_refuses_run() {
    let (_d, p) = setup();
    fs::create_dir_all(p.join("run")).unwrap();
    fs::write(p.join("run/.lock"), "1").unwrap();
    let o = run(&p, &["train", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn forecast_emits_horizon_rows() {
    let (_d, p) = trained();
    let o = ok(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,variable,value");
    assert_eq!(lines.len(), 1 + 4 * 2);
    // Last full lookback window of 120 rows starts at 112 and forecasts rows 120..124.
    assert!(lines[1].starts_with("120,v0,"));
    assert!(lines[8].starts_with("123,v1,"));
}

#[test]
fn forecast_reorders_and_rejects_columns() {
    let (_d, p) = trained();
    let text = fs::read_to_string(p.join("series.csv")).unwrap();
    let swapped: String = text
        .lines()
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{},{},{}\n", c[0], c[2], c[1])
        })
        .collect();
    fs::write(p.join("swapped.csv"), swapped).unwrap();
    let a = ok(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv"]);
    let b = ok(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "swapped.csv"]);
    assert_eq!(a.stdout, b.stdout);

    let extra: String = text.lines().map(|l| format!("{l},1\n")).collect();
    fs::write(p.join("extra.csv"), extra.replacen(",1\n", ",v2\n", 1)).unwrap();
    let o = run(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "extra.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("v2"));
}

#[test]
fn forecast_units() {
    let (_d, p) = trained();
    let model = DualVdt::load(&p.join("run/model.ckpt")).unwrap();
    let norm = model.norm.clone().unwrap();
    let value = |o: &Output| -> Vec<f64> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    };
    let base = ["forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--origin", "30"];
    let orig = value(&ok(&p, &base));
    let normed = value(&ok(&p, &[&base[..], &["--units", "normalized"]].concat()));
    for (c, (o, z)) in orig.iter().zip(&normed).enumerate() {
        let i = c % 2;
        assert!((o - (z * norm.std[i] + norm.mean[i])).abs() < 1e-9);
    }
    let o = run(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--origin", "113"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_matches_library() {
    let (_d, p) = trained();
    ok(&p, &["evaluate", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--seed", "5", "--out", "ev"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ev/evaluate.json")).unwrap()).unwrap();

    let model = DualVdt::load(&p.join("run/model.ckpt")).unwrap();
    let series = load_csv(&p.join("series.csv"), &CsvSchema::Generic { target: "v0".into() }).unwrap();
    let info = model.data.unwrap();
    let sw = SplitWindows::new(&series, info.split, 8, 4, info.stride).unwrap();
    let test = model.norm.as_ref().unwrap().apply_all(sw.get(dualvdt::data::Split::Test)).unwrap();
    let m = model.evaluate(&test, 5).unwrap();
    assert_eq!(json["mse"].as_f64().unwrap(), m.mse);
    assert_eq!(json["mae"].as_f64().unwrap(), m.mae);
    assert_eq!(json["n_windows"].as_u64().unwrap() as usize, m.n_windows);
    assert_eq!(json["split"], "test");
}

#[test]
fn forecast_then_evaluate_agree() {
    // Forecasts of every test origin, scored by hand, reproduce evaluate's MSE.
    let (_d, p) = trained();
    let o = ok(&p, &["evaluate", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--seed", "9"]);
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();

    let model = DualVdt::load(&p.join("run/model.ckpt")).unwrap();
    let series = load_csv(&p.join("series.csv"), &CsvSchema::Generic { target: "v0".into() }).unwrap();
    let info = model.data.unwrap();
    let sw = SplitWindows::new(&series, info.split, 8, 4, info.stride).unwrap();
    let norm = model.norm.as_ref().unwrap();
    let (mut se, mut count) = (0.0, 0usize);
    for w in sw.get(dualvdt::data::Split::Test) {
        let origin = w.origin.to_string();
        let f = ok(
            &p,
            &[
                "forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--origin", &origin,
                "--units", "normalized", "--seed", "9",
            ],
        );
        let text = String::from_utf8(f.stdout).unwrap();
        let truth = norm.apply(w).unwrap();
        for (h, line) in text.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("v0")).enumerate() {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            se += (v - truth.y.data()[h * 2]).powi(2);
            count += 1;
        }
    }
    let mse = se / count as f64;
    assert!((mse - json["mse"].as_f64().unwrap()).abs() < 1e-12, "{mse} vs {}", json["mse"]);
}

#[test]
fn ablate_single_cell_and_report() {
    let (_d, p) = setup();
    ok(
        &p,
        &[
            "ablate", "--config", "run.toml", "--out", "abl", "--encoders", "fc", "--scores", "fc", "--dual", "on",
            "--sweep", "none",
        ],
    );
    let csv = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "encoder,score_model,dual,sampler,dataset,mse,mae,seed");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("FC,FC,ON,AS,"), "{}", lines[1]);
    let o = ok(&p, &["report", "--input", "abl/ablation.csv"]);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        fs::read_to_string(p.join("abl/ablation.md")).unwrap()
    );
}

#[test]
fn replay_is_byte_identical() {
    let (_d, p) = trained();
    ok(&p, &["replay", "run/manifest-train.toml", "--out", "replayed"]);
    assert_eq!(fs::read(p.join("run/loss.csv")).unwrap(), fs::read(p.join("replayed/loss.csv")).unwrap());
    assert_eq!(fs::read(p.join("run/model.ckpt")).unwrap(), fs::read(p.join("replayed/model.ckpt")).unwrap());

    ok(&p, &["forecast", "--checkpoint", "run/model.ckpt", "--input", "series.csv", "--seed", "3", "--out", "fc"]);
    ok(&p, &["replay", "fc/manifest-forecast.toml", "--out", "fc2"]);
    assert_eq!(fs::read(p.join("fc/forecast.csv")).unwrap(), fs::read(p.join("fc2/forecast.csv")).unwrap());
}

#[test]
fn damaged_manifest_is_config_error() {
    let (_d, p) = trained();
    let m = fs::read_to_string(p.join("run/manifest-train.toml")).unwrap();
    fs::write(p.join("m.toml"), m.replace("command = \"train\"", "command = \"dance\"")).unwrap();
    assert_eq!(run(&p, &["replay", "m.toml"]).status.code(), Some(2));
}
