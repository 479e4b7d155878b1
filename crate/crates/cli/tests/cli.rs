use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "dataset": { "n_classes": 3, "d_in": 4, "n_source": 60, "n_target": 90, "shift_magnitude": 0.4, "seed": 3 },
  "loop": { "budget": 6, "rounds": 3, "d_feat": 16, "k": 2,
            "train": { "pretrain_epochs": 5, "epochs_per_round": 2 } }
}"#;

fn ada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ada")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = ada(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for r in 1..=3 {
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("round_{r:03}.json"))).unwrap()).unwrap();
        assert_eq!(report["annotated_total"], 2 * r);
        assert_eq!(report["selected"].as_array().unwrap().len(), 2);
        let gmm: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("gmm_round_{r:03}.json"))).unwrap()).unwrap();
        for key in ["pi", "mu", "sigma2"] {
            assert_eq!(gmm[key].as_array().unwrap().len(), 4);
        }
        assert!(gmm["iterations"].as_u64().unwrap() >= 1);
        let pi: f64 = gmm["pi"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((pi - 1.0).abs() < 1e-9);
    }
    let csv = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("strategy,seed,round,accuracy,selected_error_rate"));
    assert_eq!(lines.count(), 4);
    assert!(out.join("model.json").exists());
}

#[test]
fn compare_covers_every_strategy_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("cmp");
    let o = ada(&[
        "compare", "--strategies", "diana,random,entropy", "--seeds", "2", "--config", &cfg, "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    // 3 strategies x 2 seeds x (pretrained + 3 rounds)
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 4);
    for s in ["diana", "random", "entropy"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{s},1,3,"))));
        assert!(out.join(s).join("seed_1").join("round_003.json").exists());
    }
    assert!(out.join("diana/seed_0/gmm_round_001.json").exists());
    assert!(!out.join("random/seed_0/gmm_round_001.json").exists());
}

#[test]
fn diagnose_consistency_sweeps_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("diag");
    let o = ada(&[
        "diagnose-consistency", "--k-sweep", "2,4,8,16", "--config", &cfg, "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("consistency.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("seed,k,quantile"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}

#[test]
fn diagnose_rejects_k_above_feature_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = ada(&["diagnose-consistency", "--k-sweep", "64", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();

    let bad_rounds = write_config(dir.path(), r#"{ "loop": { "budget": 10, "rounds": 3 } }"#);
    assert!(!ada(&["run", "--config", &bad_rounds, "--out", out]).status.success());

    let unknown = write_config(dir.path(), r#"{ "loop": { "budgett": 10 } }"#);
    assert!(!ada(&["run", "--config", &unknown, "--out", out]).status.success());

    let too_big = write_config(
        dir.path(),
        r#"{ "dataset": { "n_target": 20, "n_source": 30 }, "loop": { "budget": 50, "rounds": 5 } }"#,
    );
    let o = ada(&["run", "--config", &too_big, "--out", out]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));

    assert!(!ada(&["run", "--config", "/nonexistent/config.json", "--out", out]).status.success());
    let cfg = write_config(dir.path(), SMALL);
    assert!(!ada(&["compare", "--strategies", "diana,bogus", "--config", &cfg, "--out", out]).status.success());
}

#[test]
fn dataset_file_is_resolved_next_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = String::from("2,2\n");
    for i in 0..40 {
        let c = i % 2;
        let dom = if i < 16 { "S" } else { "T" };
        let x = if c == 0 { -1.0 } else { 1.0 } + (i as f64) * 0.01;
        data.push_str(&format!("{i},{dom},{c},{x},{}\n", -x));
    }
    fs::write(dir.path().join("pool.csv"), data).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "dataset_file": "pool.csv", "loop": { "budget": 4, "rounds": 2, "d_feat": 8, "k": 2 } }"#,
    );
    let out = dir.path().join("out");
    let o = ada(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("round_002.json").exists());
}
