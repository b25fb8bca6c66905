use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const FAST: &str = r#"{
  "seed": 3,
  "experiment": { "instances": 1, "train": { "epochs": 2 } }
}"#;

fn oxipipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oxipipe"))
        .args(args)
        .env("OXIPIPE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            let digest = Sha256::digest(fs::read(&p).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            (p.file_name().unwrap().to_string_lossy().into_owned(), hex)
        })
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("config.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_defaults_and_rerun_hashes() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = oxipipe(&["synth", "--out", s(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rvf = fs::read(a.join("recording.rvf")).unwrap();
    assert_eq!(&rvf[..4], b"RVF1");
    assert_eq!(u32::from_le_bytes(rvf[12..16].try_into().unwrap()), 300);
    assert_eq!(f32::from_le_bytes(rvf[16..20].try_into().unwrap()), 30.0);
    assert_eq!(hashes(&a), hashes(&b));

    let m = manifest(&a);
    let listed: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let on_disk: Vec<String> = hashes(&a).into_keys().collect();
    assert_eq!(listed.len(), on_disk.len());
    assert!(on_disk.iter().all(|f| listed.contains(&f.as_str())));
    assert_eq!(m["subcommand"], "synth");
}

#[test]
fn bad_json_reports_position() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "{\n  \"seed\": ,\n}");
    let o = oxipipe(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config.json:2:"), "{err}");
    assert!(!tmp.path().join("o").join("manifest.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "{ \"sede\": 4 }");
    let o = oxipipe(&["pipeline", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_and_explain_need_a_model() {
    let tmp = TempDir::new().unwrap();
    for mode in ["eval", "explain"] {
        let o = oxipipe(&["pipeline", "--mode", mode, "--out", s(&tmp.path().join(mode))]);
        assert_eq!(o.status.code(), Some(3), "{mode}");
    }
}

#[test]
fn train_eval_explain_chain() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, FAST);
    let train = tmp.path().join("train");
    let again = tmp.path().join("again");
    for d in [&train, &again] {
        let o = oxipipe(&["pipeline", "--mode", "train", "--config", s(&cfg), "--out", s(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let h = hashes(&train);
    for f in ["model.json", "loss.csv", "loss.svg", "report.json", "predictions.csv"] {
        assert!(h.contains_key(f), "missing {f}");
    }
    assert_eq!(h, hashes(&again));
    assert_eq!(manifest(&train)["master_seed"], 3);

    let model = train.join("model.json");
    let eval = tmp.path().join("eval");
    let o = oxipipe(&["pipeline", "--mode", "eval", "--config", s(&cfg), "--model", s(&model), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(eval.join("predictions.csv")).unwrap(),
        fs::read(train.join("predictions.csv")).unwrap()
    );

    let explain = tmp.path().join("explain");
    let o = oxipipe(&["pipeline", "--mode", "explain", "--config", s(&cfg), "--model", s(&model), "--out", s(&explain)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Per-window relevance (bias row included) sums to the prediction.
    let pred: BTreeMap<usize, f64> = fs::read_to_string(train.join("predictions.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    let text = fs::read_to_string(explain.join("relevance.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("window,stream,sample_index,relevance"));
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        *sums.entry(f[0].parse().unwrap()).or_default() += f[3].parse::<f64>().unwrap();
    }
    assert!(!sums.is_empty());
    for (w, total) in sums {
        let p = pred[&w];
        assert!((total - p).abs() <= 1e-6 * p.abs(), "window {w}: {total} vs {p}");
    }
    let profile: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(explain.join("profile.json")).unwrap()).unwrap();
    assert!(profile.is_object());
}

#[test]
fn plot_is_byte_stable_and_rejects_empty_csv() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("loss.csv");
    fs::write(&csv, "epoch,train_loss,val_loss\n1,4.5,5.0\n2,2.25,3.0\n3,1.0,2.5\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = oxipipe(&["plot", s(&csv), "--out", s(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let svg = fs::read(a.join("loss.svg")).unwrap();
    assert!(svg.starts_with(b"<svg"));
    assert_eq!(svg, fs::read(b.join("loss.svg")).unwrap());

    let profile = tmp.path().join("profile.json");
    fs::write(&profile, r#"{"weight_profile":{"scores":[5,2,3],"shares":[0.5,0.2,0.3]}}"#).unwrap();
    let o = oxipipe(&["plot", s(&profile), "--out", s(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bars = fs::read_to_string(a.join("profile.svg")).unwrap();
    assert!(bars.contains("sum: 1.0000"), "{bars}");

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = oxipipe(&["plot", s(&empty), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(14));
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let o = oxipipe(&["plot", s(&tmp.path().join("nope.csv")), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(4));
}
