use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsl"))
        .args(args)
        .env("DRSL_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = drsl(&["synth", "--out", p(dir), "--slides-per-class", "6", "--tiles-min", "8", "--tiles-max", "12", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &[&str] = &["--codebook-k", "6", "--batch-size", "4", "--tiles-per-slide", "4", "--freeze-epochs", "1", "--lr", "0.001"];

fn prepare(data: &Path, out: &Path, extra: &[&str]) {
    let manifest = data.join("manifest.txt");
    let mut args = vec!["prepare", "--manifest", p(&manifest), "--out", p(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = drsl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = drsl(&["synth", "--out", p(d), "--seed", "11"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ta = read_tree(a.path());
    assert_eq!(ta, read_tree(b.path()));
    let manifest = String::from_utf8(ta.iter().find(|(n, _)| n == "manifest.txt").unwrap().1.clone()).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("slide ")).count(), 40);
}

#[test]
fn bad_rho_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    for rho in ["0", "1.5", "-0.2"] {
        let o = drsl(&["synth", "--out", p(d.path()), "--rho", rho]);
        assert_eq!(o.status.code(), Some(2), "rho {rho}");
        assert!(stderr(&o).contains("--rho"));
    }
}

#[test]
fn train_without_prepare_names_the_missing_step() {
    let d = tempfile::tempdir().unwrap();
    let o = drsl(&["train", "--out", p(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("drsl prepare"), "{}", stderr(&o));

    let o = drsl(&["eval", "--out", p(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("drsl train"), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    prepare(data.path(), out.path(), &["--epochs", "3"]);
    for f in ["run_config.txt", "bank.drsb", "codebook.drsc", "prepare.drsk"] {
        assert!(out.path().join(f).exists(), "{f}");
    }

    let o = drsl(&["train", "--out", p(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["stage"], 1);
    assert_eq!(lines[2]["stage"], 2);
    assert!(lines.iter().all(|l| l["loss_total"].as_f64().unwrap().is_finite()));

    let o = drsl(&["eval", "--out", p(out.path()), "--split", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["per_slide"].as_array().unwrap().len(), 12);
    assert_eq!(report["epoch"], 3);
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(report["config"].as_str().unwrap().contains("codebook_k = 6"));

    let o = drsl(&["encode", "--out", p(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (k, d, rows) = drsl::vlad::read_descriptors(&out.path().join("descriptors.drsv")).unwrap();
    assert_eq!((k, rows.len()), (6, 12));
    assert!(rows.iter().all(|(_, v)| v.len() == k * d));
    assert!(out.path().join("descriptors.config.txt").exists());
}

#[test]
fn eval_warns_that_seed_is_ignored() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    prepare(data.path(), out.path(), &["--epochs", "1"]);
    assert!(drsl(&["train", "--out", p(out.path())]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_drsl"))
        .args(["eval", "--out", p(out.path()), "--seed", "5"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("--seed is ignored"), "{}", stderr(&o));
}

fn losses(log: &str) -> Vec<[f64; 3]> {
    log.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            ["loss_total", "loss_cls", "loss_contrastive"].map(|k| v[k].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn resume_matches_a_straight_run() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let straight = tempfile::tempdir().unwrap();
    prepare(data.path(), straight.path(), &["--epochs", "4"]);
    let log_a = straight.path().join("metrics.jsonl");
    assert!(drsl(&["train", "--out", p(straight.path()), "--log", p(&log_a)]).status.success());

    let split = tempfile::tempdir().unwrap();
    prepare(data.path(), split.path(), &["--epochs", "2"]);
    let log_b = split.path().join("metrics.jsonl");
    assert!(drsl(&["train", "--out", p(split.path()), "--log", p(&log_b)]).status.success());
    let o = drsl(&["train", "--out", p(split.path()), "--log", p(&log_b), "--resume", "--epochs", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = losses(&fs::read_to_string(log_a).unwrap());
    let b = losses(&fs::read_to_string(log_b).unwrap());
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    let manifest = data.path().join("manifest.txt");
    let o = drsl(&[
        "ablate", "--manifest", p(&manifest), "--out", p(out.path()), "--ks", "4,8", "--rs", "2,3", "--epochs", "2",
        "--freeze-epochs", "1", "--batch-size", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.path().join("ablation.jsonl")).unwrap();
    let cells: Vec<(u64, u64)> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["codebook_k"].as_u64().unwrap(), v["tiles_per_slide"].as_u64().unwrap())
        })
        .collect();
    assert_eq!(cells, vec![(4, 2), (4, 3), (8, 2), (8, 3)]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
}

#[test]
fn config_file_and_overrides_are_echoed() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    let cfg = out.path().join("my.cfg");
    fs::write(&cfg, "# tuned\nfeature_dim = 8\nweight_decay = 0.001\n").unwrap();
    let cfg_s = cfg.display().to_string();
    prepare(data.path(), out.path(), &["--config", &cfg_s, "--set", "lambda=0.5"]);
    let echoed = fs::read_to_string(out.path().join("run_config.txt")).unwrap();
    for line in ["feature_dim = 8", "weight_decay = 0.001", "lambda = 0.5", "codebook_k = 6", "input_dim = 32"] {
        assert!(echoed.lines().any(|l| l == line), "missing `{line}` in\n{echoed}");
    }
    let o = drsl(&["prepare", "--manifest", "nowhere.txt", "--out", p(out.path()), "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
}
