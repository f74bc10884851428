use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rashomon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rashomon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT_RUN: &str = "[train]\nlearning_rate = 0.01\nmax_epochs = 2\n";

#[test]
fn gradcheck_default_seed_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = rashomon(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("graph ")).count(), 25);
}

#[test]
fn zero_batch_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let o = rashomon(dir.path(), &["gen-data", "--config", "c.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = rashomon(dir.path(), &["gen-data", "--config", "absent.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("absent.toml"), "{}", stderr(&o));

    fs::write(dir.path().join("c.toml"), "").unwrap();
    let o = rashomon(dir.path(), &["train", "--config", "c.toml", "--data", "nodata", "--out", "r"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nodata"), "{}", stderr(&o));
}

#[test]
fn malformed_toml_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[model]\nrank = \"two\"\n").unwrap();
    let o = rashomon(dir.path(), &["gen-data", "--config", "c.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.toml"), "{}", stderr(&o));
}

#[test]
fn heatmap_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), format!("[data]\nn = 200\n[model]\nm = 2\nhidden = [8]\nattach = [0]\n[eval]\neigvec_k = 2\n{SHORT_RUN}")).unwrap();
    assert!(rashomon(p, &["gen-data", "--config", "c.toml", "--out", "d"]).status.success());
    assert!(rashomon(p, &["train", "--config", "c.toml", "--data", "d", "--out", "r"]).status.success());
    let o = rashomon(p, &["export-heatmaps", "--model", "r", "--data", "d", "--samples", "3,900", "--out", "h.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("samples"), "{}", stderr(&o));
    let o = rashomon(p, &["export-heatmaps", "--model", "r", "--data", "d", "--samples", "3", "--concepts", "12", "--out", "h.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("concepts"), "{}", stderr(&o));
}

#[test]
fn default_pipeline_reports_every_metric_family() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), SHORT_RUN).unwrap();
    for args in [
        &["gen-data", "--config", "c.toml", "--out", "d"][..],
        &["train", "--config", "c.toml", "--data", "d", "--out", "r"],
        &["eval", "--model", "r", "--data", "d", "--out", "e/report.json"],
        &["export-heatmaps", "--model", "r", "--data", "d", "--samples", "0,7,11", "--out", "h.json"],
    ] {
        let o = rashomon(p, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("e/report.json")).unwrap()).unwrap();
    for key in ["hamming", "concept_cka", "shap_similarity", "union_size", "eigvec"] {
        assert!(!report[key].is_null(), "missing {key}");
    }
    assert_eq!(report["task_accuracy"].as_array().unwrap().len(), 4);
    assert_eq!(report["eigvec"].as_array().unwrap().len(), 3);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_digest"], report["config_digest"]);
    assert!(p.join("e/report.json.manifest.json").is_file());

    let heat: serde_json::Value = serde_json::from_slice(&fs::read(p.join("h.json")).unwrap()).unwrap();
    for model in heat["models"].as_array().unwrap() {
        for row in model["belief"].as_array().unwrap() {
            assert!(row.as_array().unwrap().iter().all(|b| (0.0..=1.0).contains(&b.as_f64().unwrap())));
        }
    }
}

#[test]
fn seed_flag_drives_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), format!("[data]\nn = 300\n[model]\nm = 2\nhidden = [8, 8]\nattach = [0, 1]\n[eval]\neigvec_k = 2\n{SHORT_RUN}")).unwrap();
    for (data, run) in [("d1", "r1"), ("d2", "r2")] {
        assert!(rashomon(p, &["--seed", "19", "gen-data", "--config", "c.toml", "--out", data]).status.success());
        assert!(rashomon(p, &["train", "--config", "c.toml", "--data", data, "--out", run, "--seed", "19"]).status.success());
    }
    for f in ["d1/data.bin", "r1/report.json", "r1/log.jsonl", "r1/checkpoint/weights.bin"] {
        let other = f.replacen('1', "2", 1);
        assert_eq!(fs::read(p.join(f)).unwrap(), fs::read(p.join(&other)).unwrap(), "{f}");
    }
    assert!(rashomon(p, &["--seed", "20", "gen-data", "--config", "c.toml", "--out", "d3"]).status.success());
    assert_ne!(fs::read(p.join("d1/data.bin")).unwrap(), fs::read(p.join("d3/data.bin")).unwrap());
}
