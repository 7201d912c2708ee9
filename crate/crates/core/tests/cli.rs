use std::path::Path;
use std::process::{Command, Output};

use cabb::cli::{read_metrics, RunConfigFile};
use cabb::data::load_features;
use cabb::trainer::RunSummary;

fn cabb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cabb"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cabb(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "seeds = [1, 2, 3]\n[shift]\nsamples_per_class = 60\n[source]\nepochs = 20\n[adapt]\nepochs = 3\n";

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    ok(dir.path(), &["--config", "run.toml", "gen-data"]);
    ok(dir.path(), &["--config", "run.toml", "train-source"]);
    dir
}

#[test]
fn gen_data_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for d in ["a", "b"] {
        std::fs::create_dir(p.join(d)).unwrap();
        ok(p, &["gen-data", "--seed", "7", "--out", d]);
    }
    for f in ["source.txt", "target.txt"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap());
    }
    let t = load_features(p.join("a/target.txt")).unwrap();
    assert_eq!(t.len(), 6 * 300);
}

#[test]
fn missing_output_dir_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = cabb(dir.path(), &["gen-data", "--out", "no_such_dir"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_dir"));
}

#[test]
fn bad_config_key_exits_2_with_key_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[adapt]\nwarmup_epochs = 3\n").unwrap();
    let out = cabb(dir.path(), &["--config", "bad.toml", "adapt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup_epochs"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cabb(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cabb(dir.path(), &["adapt", "--ablate", "no-everything"]).status.code(), Some(2));
    assert_eq!(cabb(dir.path(), &["report", "--run", "nowhere"]).status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--print-config"]);
    assert_eq!(RunConfigFile::parse(&text).unwrap(), RunConfigFile::default());
    std::fs::write(dir.path().join("printed.toml"), &text).unwrap();
    assert_eq!(ok(dir.path(), &["--config", "printed.toml", "--print-config"]), text);
}

#[test]
fn adapt_report_and_inspect_agree() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["--config", "run.toml", "adapt", "--out", "runs"]);

    let summaries: Vec<RunSummary> = [1, 2, 3]
        .iter()
        .map(|s| {
            let text = std::fs::read_to_string(p.join(format!("runs/seed-{s}/summary.json"))).unwrap();
            serde_json::from_str(&text).unwrap()
        })
        .collect();
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("runs/aggregate.json")).unwrap()).unwrap();
    let xs: Vec<f64> = summaries.iter().map(|s| s.mean_acc).collect();
    let m = (xs[0] + xs[1] + xs[2]) / 3.0;
    let sd = (((xs[0] - m).powi(2) + (xs[1] - m).powi(2) + (xs[2] - m).powi(2)) / 2.0).sqrt();
    assert!((agg["mean_acc"]["mean"].as_f64().unwrap() - m).abs() < 1e-12);
    assert!((agg["mean_acc"]["std"].as_f64().unwrap() - sd).abs() < 1e-12);

    ok(p, &["report", "--run", "runs/seed-1"]);
    let csv = std::fs::read_to_string(p.join("runs/seed-1/epochs.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3 * 2);
    for branch in ["1", "2"] {
        let g: Vec<f64> = rows.iter().filter(|r| r[1] == branch).map(|r| r[6].parse().unwrap()).collect();
        assert!(g.windows(2).all(|w| w[1] <= w[0]));
    }
    let records = read_metrics(&p.join("runs/seed-1/metrics.jsonl")).unwrap();
    assert_eq!(rows[0][5].parse::<f64>().unwrap(), records[0].clean_set_precision);

    for branch in [1usize, 2] {
        let info = ok(
            p,
            &["--config", "run.toml", "inspect-split", "--seed", "1", "--branch", &branch.to_string(), "--out", "split.csv"],
        );
        let v: serde_json::Value = serde_json::from_str(&info).unwrap();
        let epoch1 = records.iter().find(|r| r.epoch == 1 && r.branch == branch).unwrap();
        assert_eq!(v["clean_set_precision"].as_f64().unwrap(), epoch1.clean_set_precision);
        assert_eq!(v["clean_set_size"].as_u64().unwrap() as usize, epoch1.clean_set_size);
        let dump = std::fs::read_to_string(p.join("split.csv")).unwrap();
        let clean = dump.lines().skip(1).filter(|l| l.ends_with(",1")).count();
        assert_eq!(clean, epoch1.clean_set_size);
    }
}

#[test]
fn ablation_flag_lands_in_summary() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["--config", "run.toml", "adapt", "--seed", "4", "--ablate", "no-curriculum", "--out", "abl"]);
    let s: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(p.join("abl/seed-4/summary.json")).unwrap()).unwrap();
    assert!(!s.config.use_curriculum);
    assert!(s.config.use_noisy_loss);
    assert!(!p.join("abl/aggregate.json").exists());
}
