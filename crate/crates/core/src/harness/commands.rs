//! Subcommand bodies. Each returns the process exit code on success paths
//! that still need a non-zero status (theory violations, failed runs).

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::experiment::{
    check_resume, eval_checkpoint, prepare, run_dir, run_method, write_outcome, write_summary, Method, PolicyCheckpoint,
    RunOutcome,
};
use crate::error::{Error, Result};
use crate::mdp::io::write_jsonl;
use crate::mdp::{mean_row_tv, Dataset, Domain};
use crate::theory::{run_all, DEFAULT_GAMMAS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_THEORY: i32 = 3;

/// Maps a library error onto the CLI exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Parses `3`, `0,1,4` or `0..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |_| Error::Config(format!("seed: cannot parse {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a >= b {
            return Err(Error::Config(format!("seed: empty range {s:?}")));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|p| p.trim().parse::<u64>().map_err(bad)).collect()
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    if s == "all" {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("jobs: must be at least 1".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn tmp_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes every file under a temporary name first and renames them only
/// once all writes succeeded.
fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        for (path, bytes) in files {
            let tmp = tmp_path(path);
            written.push(tmp.clone());
            fs::write(&tmp, bytes)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for t in &written {
            let _ = fs::remove_file(t);
        }
        return Err(e);
    }
    for (path, _) in files {
        fs::rename(tmp_path(path), path)?;
    }
    Ok(())
}

fn jsonl(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(ds, BufWriter::new(&mut buf))?;
    Ok(buf)
}

pub fn gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<i32> {
    if !out.is_dir() {
        return Err(Error::Config(format!("out: directory {} does not exist", out.display())));
    }
    let d = prepare(cfg, seed)?;
    let n_src = d.mixed.count_domain(Domain::Source);
    let n_all = d.mixed.n_transitions();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "config_hash={}", cfg.hash());
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "target_env_fingerprint={}", d.target_mdp.fingerprint());
    let _ = writeln!(manifest, "source_env_fingerprint={}", d.source_mdp.fingerprint());
    let _ = writeln!(manifest, "dynamics_mean_row_tv={:.6}", mean_row_tv(&d.source_mdp, &d.target_mdp));
    for (name, ds) in [("source", &d.source), ("target", &d.target), ("mixed", &d.mixed)] {
        let _ = writeln!(manifest, "{name}_trajectories={}", ds.trajectories.len());
        let _ = writeln!(manifest, "{name}_transitions={}", ds.n_transitions());
    }
    let _ = writeln!(manifest, "source_share={:.6}", n_src as f64 / n_all as f64);
    let files = vec![
        (out.join("source.jsonl"), jsonl(&d.source)?),
        (out.join("target.jsonl"), jsonl(&d.target)?),
        (out.join("mixed.jsonl"), jsonl(&d.mixed)?),
        (out.join("manifest.txt"), manifest.into_bytes()),
    ];
    write_all_atomic(&files)?;
    println!("wrote source, target and mixed datasets ({n_all} transitions) to {}", out.display());
    Ok(EXIT_OK)
}

fn report_outcome(o: &RunOutcome) {
    match (&o.error, o.final_score()) {
        (Some(e), _) => eprintln!("{} seed {}: aborted: {e}", o.method, o.seed),
        (None, Some(s)) => println!("{} seed {}: final normalized score {s:.2}", o.method, o.seed),
        (None, None) => println!("{} seed {}: no evaluations recorded", o.method, o.seed),
    }
}

pub fn run(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64], out: &Path, jobs: Option<usize>) -> Result<i32> {
    for &m in methods {
        for &s in seeds {
            check_resume(cfg, &run_dir(out, m, s))?;
        }
    }
    let cells: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let outcomes: Vec<RunOutcome> = pool(jobs)?.install(|| cells.par_iter().map(|&(m, s)| run_method(cfg, m, s)).collect());
    let mut failed = false;
    for o in &outcomes {
        write_outcome(cfg, &run_dir(out, o.method, o.seed), o)?;
        report_outcome(o);
        failed |= o.error.is_some();
    }
    for &m in methods {
        let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.method == m).collect();
        write_summary(cfg, out, m, &mine)?;
    }
    Ok(if failed { EXIT_RUNTIME } else { EXIT_OK })
}

pub fn sweep_cell_name(delta: f64, lambda: f64) -> String {
    format!("delta-{delta}_lambda-{lambda}")
}

pub fn sweep(cfg: &ExperimentConfig, method: Method, seed: u64, out: &Path, jobs: Option<usize>) -> Result<i32> {
    let cells: Vec<(f64, f64)> =
        cfg.sweep.deltas.iter().flat_map(|&d| cfg.sweep.lambdas.iter().map(move |&l| (d, l))).collect();
    if cells.is_empty() {
        return Err(Error::Config("sweep.delta and sweep.lambda must both be non-empty".into()));
    }
    let cell_cfg = |d: f64, l: f64| {
        let mut c = cfg.clone();
        c.ts.delta_mix = d;
        c.cltv.lambda = l;
        c
    };
    for &(d, l) in &cells {
        check_resume(&cell_cfg(d, l), &out.join(sweep_cell_name(d, l)))?;
    }
    let outcomes: Vec<RunOutcome> =
        pool(jobs)?.install(|| cells.par_iter().map(|&(d, l)| run_method(&cell_cfg(d, l), method, seed)).collect());
    let mut csv = format!("# config_hash={}\ndelta,lambda,normalized_score\n", cfg.hash());
    let mut failed = 0;
    for (&(d, l), o) in cells.iter().zip(&outcomes) {
        write_outcome(&cell_cfg(d, l), &out.join(sweep_cell_name(d, l)), o)?;
        match o.final_score() {
            Some(s) => {
                let _ = writeln!(csv, "{d},{l},{s:.6}");
            }
            None => {
                failed += 1;
                eprintln!("cell delta={d} lambda={l} failed: {}", o.error.as_deref().unwrap_or("no evaluations"));
                let _ = writeln!(csv, "{d},{l},NaN");
            }
        }
    }
    fs::create_dir_all(out)?;
    write_all_atomic(&[(out.join("sweep.csv"), csv.into_bytes())])?;
    println!("{} cells written to {} ({failed} failed)", cells.len(), out.join("sweep.csv").display());
    Ok(if failed > 0 { EXIT_RUNTIME } else { EXIT_OK })
}

pub fn verify_theory(trials: usize, seed: u64, slack: f64, jobs: Option<usize>) -> Result<i32> {
    if trials == 0 {
        eprintln!("warning: trials = 0, every check passes vacuously");
    }
    let start = Instant::now();
    let reports = pool(jobs)?.install(|| run_all(trials, seed, &DEFAULT_GAMMAS, slack))?;
    let mut violations = 0;
    println!("{:<22} {:>8} {:>10} {:>14} {:>14}", "check", "trials", "violations", "worst_gap", "slack_used");
    for r in &reports {
        violations += r.violations;
        println!(
            "{:<22} {:>8} {:>10} {:>14.6e} {:>14.3e}",
            r.bound_name, r.n_trials, r.violations, r.worst_gap, r.max_slack_used
        );
    }
    println!("total violations: {violations} ({:.2} s)", start.elapsed().as_secs_f64());
    Ok(if violations > 0 { EXIT_THEORY } else { EXIT_OK })
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<i32> {
    let text = fs::read_to_string(checkpoint)?;
    let ck: PolicyCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", checkpoint.display())))?;
    if ck.config_hash != cfg.hash() {
        eprintln!("warning: checkpoint config hash {} differs from the current config {}", ck.config_hash, cfg.hash());
    }
    let (ret, score) = eval_checkpoint(cfg, &ck, seed)?;
    println!("method={} seed={} mean_eval_return={ret:.6} normalized_score={score:.6}", ck.method, ck.seed);
    Ok(EXIT_OK)
}
