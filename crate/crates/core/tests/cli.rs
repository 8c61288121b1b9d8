use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
env.kind = grid
env.width = 4
env.height = 4
env.slip = 0.1
env.mismatch = 0.3
data.source_trajectories = 18
data.target_trajectories = 2
data.horizon = 20
classifier.epochs = 2
ts.steps = 20
ts.batch_size = 50
cltv.epochs = 2
cltv.steps_per_epoch = 100
cltv.target_steps = 100
eval.n_episodes = 5
eval.horizon = 30
eval.every = 100
";

fn cltv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cltv")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// The tiny config with `extra` lines appended; an extra key replaces the
/// tiny line for the same key.
fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap_or_default().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = TINY.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn policy_q(path: &Path) -> Vec<f64> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["q"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.conf", "cltv.lambada = 0.3\n");
    let out = tmp.path().join("runs");
    let o = cltv(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambada"));
}

#[test]
fn gen_data_into_a_missing_directory_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let missing = tmp.path().join("nope");
    let o = cltv(&["gen-data", "--config", s(&cfg), "--out", s(&missing)]);
    assert_eq!(code(&o), 1);
    assert!(!missing.exists());
}

#[test]
fn gen_data_is_deterministic_and_reports_the_mixing_share() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        fs::create_dir(d).unwrap();
        let o = cltv(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["source.jsonl", "target.jsonl", "mixed.jsonl", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let field = |k: &str| -> f64 {
        manifest.lines().find_map(|l| l.strip_prefix(&format!("{k}="))).unwrap().parse().unwrap()
    };
    let horizon = 20.0;
    let n = field("mixed_transitions");
    assert!((field("source_share") - 0.9).abs() <= horizon / n, "share {}", field("source_share"));
    assert!(manifest.contains("config_hash="));
}

#[test]
fn verify_theory_exit_codes() {
    let o = cltv(&["verify-theory", "--trials", "0"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));

    let o = cltv(&["verify-theory", "--trials", "5", "--slack", "-1"]);
    assert_eq!(code(&o), 3);

    let o = cltv(&["verify-theory", "--trials", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn vanilla_trains_no_classifiers_or_scorer() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let out = tmp.path().join("runs");
    let o = cltv(&["run", "--config", s(&cfg), "--method", "vanilla,cltv", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = out.join("vanilla/seed-1");
    assert!(v.join("metrics.csv").exists() && v.join("policy.json").exists());
    for f in ["q_xu.json", "q_xux.json", "scorer.json"] {
        assert!(!v.join(f).exists(), "vanilla wrote {f}");
        assert!(out.join("cltv/seed-1").join(f).exists(), "cltv did not write {f}");
    }
}

#[test]
fn five_seeds_give_five_metric_files_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let out = tmp.path().join("runs");
    let o = cltv(&["run", "--config", s(&cfg), "--method", "vanilla", "--seed", "0..5", "--jobs", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut bodies = Vec::new();
    let mut scores = Vec::new();
    for seed in 0..5 {
        bodies.push(fs::read_to_string(out.join(format!("vanilla/seed-{seed}/metrics.csv"))).unwrap());
    }
    bodies.dedup();
    assert_eq!(bodies.len(), 5);
    let summary = fs::read_to_string(out.join("vanilla/summary.csv")).unwrap();
    for line in summary.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[1] == "mean±std" {
            let (m, sd) = cols[2].split_once('±').unwrap();
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((m.parse::<f64>().unwrap() - mean).abs() < 0.006);
            assert!((sd.parse::<f64>().unwrap() - var.sqrt()).abs() < 0.006);
        } else {
            scores.push(cols[2].parse::<f64>().unwrap());
        }
    }
    assert_eq!(scores.len(), 5);
}

#[test]
fn resume_under_a_different_config_is_refused() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(tmp.path(), "a.conf", "");
    let b = write_config(tmp.path(), "b.conf", "cltv.lambda = 0.3\n");
    let out = tmp.path().join("runs");
    assert_eq!(code(&cltv(&["run", "--config", s(&a), "--method", "vanilla", "--seed", "0", "--out", s(&out)])), 0);
    assert_eq!(code(&cltv(&["run", "--config", s(&a), "--method", "vanilla", "--seed", "0", "--out", s(&out)])), 0);
    let o = cltv(&["run", "--config", s(&b), "--method", "vanilla", "--seed", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config hash"));
}

#[test]
fn evaluation_budget_does_not_change_training() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(tmp.path(), "a.conf", "");
    let b = write_config(tmp.path(), "b.conf", "eval.n_episodes = 17\n");
    let (oa, ob) = (tmp.path().join("a"), tmp.path().join("b"));
    for (c, o) in [(&a, &oa), (&b, &ob)] {
        assert_eq!(code(&cltv(&["run", "--config", s(c), "--method", "cltv", "--seed", "2", "--out", s(o)])), 0);
    }
    assert_eq!(policy_q(&oa.join("cltv/seed-2/policy.json")), policy_q(&ob.join("cltv/seed-2/policy.json")));
    assert_eq!(fs::read(oa.join("cltv/seed-2/scorer.json")).unwrap(), fs::read(ob.join("cltv/seed-2/scorer.json")).unwrap());
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (o, jobs) in [(&a, "1"), (&b, "3")] {
        let r = cltv(&["run", "--config", s(&cfg), "--method", "all", "--seed", "4", "--jobs", jobs, "--out", s(o)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    for m in ["vanilla", "ts-only", "cltv", "cltv-td", "cltv-rs"] {
        let f = format!("{m}/seed-4/metrics.csv");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f} differs");
    }
}

#[test]
fn full_sweep_grid_has_twenty_five_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.conf",
        "sweep.delta = 0.2,0.4,0.6,0.8,1.0\nsweep.lambda = 0.2,0.4,0.6,0.8,1.0\ncltv.epochs = 1\n",
    );
    let out = tmp.path().join("sweep");
    let o = cltv(&["sweep", "--config", s(&cfg), "--seed", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 25);
    assert!(rows.iter().all(|r| r.split(',').nth(2).unwrap().parse::<f64>().unwrap().is_finite()));
}

#[test]
fn one_cell_sweep_matches_run_and_delta_changes_the_scorer() {
    let tmp = TempDir::new().unwrap();
    let single = write_config(tmp.path(), "one.conf", "sweep.delta = 0.4\nsweep.lambda = 0.6\n");
    let pair = write_config(tmp.path(), "two.conf", "sweep.delta = 0.4,0.9\nsweep.lambda = 0.6\n");
    let direct = write_config(tmp.path(), "run.conf", "ts.delta = 0.4\ncltv.lambda = 0.6\n");
    let (sw1, sw2, run) = (tmp.path().join("sw1"), tmp.path().join("sw2"), tmp.path().join("run"));
    assert_eq!(code(&cltv(&["sweep", "--config", s(&single), "--seed", "1", "--out", s(&sw1)])), 0);
    assert_eq!(code(&cltv(&["sweep", "--config", s(&pair), "--seed", "1", "--out", s(&sw2)])), 0);
    assert_eq!(code(&cltv(&["run", "--config", s(&direct), "--seed", "1", "--out", s(&run)])), 0);

    let cell = sw1.join("delta-0.4_lambda-0.6");
    let strip = |p: PathBuf| -> String {
        fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with("# config_hash")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip(cell.join("metrics.csv")), strip(run.join("cltv/seed-1/metrics.csv")));
    assert_eq!(policy_q(&cell.join("policy.json")), policy_q(&run.join("cltv/seed-1/policy.json")));

    let a = fs::read(sw2.join("delta-0.4_lambda-0.6/scorer.json")).unwrap();
    let b = fs::read(sw2.join("delta-0.9_lambda-0.6/scorer.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn eval_reloads_a_saved_policy() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "");
    let out = tmp.path().join("runs");
    assert_eq!(code(&cltv(&["run", "--config", s(&cfg), "--method", "vanilla", "--seed", "0", "--out", s(&out)])), 0);
    let ck = out.join("vanilla/seed-0/policy.json");
    let first = cltv(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--seed", "9"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(stdout.contains("normalized_score="));
    let again = cltv(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--seed", "9"]);
    assert_eq!(stdout, String::from_utf8_lossy(&again.stdout));

    let missing = cltv(&["eval", "--config", s(&cfg), "--checkpoint", s(&tmp.path().join("none.json"))]);
    assert_eq!(code(&missing), 2);
}
