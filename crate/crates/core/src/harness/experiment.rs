//! End-to-end experiment pipeline: data, reward modification, training,
//! evaluation and the files each run leaves behind.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{sub_seed, ExperimentConfig};
use crate::classifiers::train_classifiers;
use crate::curriculum::{
    modify_rewards, reward_variant_rs, reward_variant_td, run_base, run_curriculum, split_by_domain, EpochRecord, LoopConfig,
};
use crate::error::{Error, Result};
use crate::mdp::{
    evaluate_return, generate_dataset, make_env, mix_datasets, optimal_q, perturb_dynamics, Dataset, Domain,
    TabularMdp, TabularPolicy,
};
use crate::neural::save_checkpoint;
use crate::offline::{normalized_score, reference_scores, OfflineLearner, TabularCql};
use crate::scoring::train_ts;

pub const METRICS_HEADER: &str = "epoch,step,mean_eval_return,normalized_score,n_selected,mean_selected_value,wall_clock_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Vanilla,
    TsOnly,
    Cltv,
    CltvTd,
    CltvRs,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vanilla, Method::TsOnly, Method::Cltv, Method::CltvTd, Method::CltvRs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::TsOnly => "ts-only",
            Method::Cltv => "cltv",
            Method::CltvTd => "cltv-td",
            Method::CltvRs => "cltv-rs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("method: unknown {s:?} (vanilla, ts-only, cltv, cltv-td, cltv-rs)")))
    }
}

/// Both MDPs plus the generated datasets for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub target_mdp: TabularMdp,
    pub source_mdp: TabularMdp,
    /// Source and target parts of the mixed set, in mixed order.
    pub source: Dataset,
    pub target: Dataset,
    pub mixed: Dataset,
}

fn behavior(mdp: &TabularMdp, epsilon: f64) -> Result<TabularPolicy> {
    let q = optimal_q(mdp, 1e-10, 1_000_000)?;
    TabularPolicy::epsilon_greedy(mdp.n_states(), mdp.n_actions(), &q.q, epsilon)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let target_mdp = make_env(&cfg.env)?;
    // The mismatch is a property of the benchmark, not of the run seed.
    let source_mdp = perturb_dynamics(&target_mdp, cfg.mismatch, sub_seed(0, "source-dynamics"))?;
    let d = &cfg.data;
    let src = generate_dataset(
        &source_mdp,
        &behavior(&source_mdp, d.source_tier.epsilon())?,
        d.source_trajectories,
        d.horizon,
        sub_seed(seed, "data-source"),
        Domain::Source,
    )?;
    let tgt = generate_dataset(
        &target_mdp,
        &behavior(&target_mdp, d.target_tier.epsilon())?,
        d.target_trajectories,
        d.horizon,
        sub_seed(seed, "data-target"),
        Domain::Target,
    )?;
    let mixed = mix_datasets(&src, &tgt, d.source_frac)?;
    let (source, target) = split_by_domain(&mixed);
    Ok(Prepared { target_mdp, source_mdp, source, target, mixed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub mean_eval_return: f64,
    pub normalized_score: f64,
    pub n_selected: usize,
    pub mean_selected_value: f64,
    pub wall_clock_ms: u128,
}

impl MetricsRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{}",
            self.epoch,
            self.step,
            self.mean_eval_return,
            self.normalized_score,
            self.n_selected,
            if self.mean_selected_value.is_nan() { "NaN".to_string() } else { format!("{:.6}", self.mean_selected_value) },
            self.wall_clock_ms
        )
    }
}

/// Milliseconds spent in each phase. Not part of the determinism contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timing {
    pub data_ms: u128,
    pub classifiers_ms: u128,
    pub ts_ms: u128,
    pub target_learner_ms: u128,
    pub training_ms: u128,
}

/// Files produced by a training run; `None` fields were not trained.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub classifiers: Option<crate::classifiers::ClassifierPair>,
    pub scorer: Option<crate::neural::MlpParams>,
    pub learner: Option<TabularCql>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Set when training stopped early.
    pub error: Option<String>,
    pub timing: Timing,
    pub artifacts: Artifacts,
}

impl RunOutcome {
    pub fn final_score(&self) -> Option<f64> {
        if self.error.is_some() {
            return None;
        }
        self.rows.last().map(|r| r.normalized_score)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub config_hash: String,
    pub env_fingerprint: String,
    pub method: String,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
}

/// Evaluates greedy policies on the target MDP against fixed references.
pub struct Evaluator {
    mdp: TabularMdp,
    random: f64,
    expert: f64,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
}

impl Evaluator {
    pub fn new(cfg: &ExperimentConfig, mdp: &TabularMdp, seed: u64) -> Result<Self> {
        let (random, expert) = reference_scores(mdp, cfg.eval.horizon, cfg.eval.n_episodes, sub_seed(seed, "reference"))?;
        Ok(Self {
            mdp: mdp.clone(),
            random,
            expert,
            n_episodes: cfg.eval.n_episodes,
            horizon: cfg.eval.horizon,
            seed: sub_seed(seed, "eval"),
        })
    }

    /// (mean return, normalized score)
    pub fn evaluate(&self, policy: &TabularPolicy) -> Result<(f64, f64)> {
        let ret = evaluate_return(&self.mdp, policy, self.n_episodes, self.horizon, self.seed)?.mean;
        Ok((ret, normalized_score(ret, self.random, self.expert)?))
    }
}

fn loop_config(cfg: &ExperimentConfig) -> LoopConfig {
    LoopConfig {
        epochs: cfg.cltv.epochs,
        steps_per_epoch: cfg.cltv.steps_per_epoch,
        batch_size: cfg.cql.batch_size,
        eval_every: cfg.eval.every,
    }
}

fn concat(source: &Dataset, target: &Dataset) -> Dataset {
    let mut out = source.clone();
    out.trajectories.extend(target.trajectories.iter().cloned());
    out
}

/// Runs one method for one seed without touching the filesystem.
pub fn run_method(cfg: &ExperimentConfig, method: Method, seed: u64) -> RunOutcome {
    let mut outcome = RunOutcome {
        method,
        seed,
        rows: Vec::new(),
        error: None,
        timing: Timing::default(),
        artifacts: Artifacts::default(),
    };
    if let Err(e) = run_inner(cfg, method, seed, &mut outcome) {
        outcome.error = Some(e.to_string());
    }
    outcome
}

fn run_inner(cfg: &ExperimentConfig, method: Method, seed: u64, out: &mut RunOutcome) -> Result<()> {
    cfg.validate()?;
    let clock = Instant::now();
    let data = prepare(cfg, seed)?;
    let eval = Evaluator::new(cfg, &data.target_mdp, seed)?;
    out.timing.data_ms = clock.elapsed().as_millis();

    let train_seed = sub_seed(seed, "train");
    let lc = loop_config(cfg);
    let mut learner = TabularCql::new(data.target_mdp.n_states(), data.target_mdp.n_actions(), cfg.cql.clone())?;
    let started = Instant::now();
    let record_clock = cfg.record_wall_clock;
    let mut rows = Vec::new();
    let mut monitor = |l: &TabularCql, rec: &EpochRecord| -> Result<()> {
        let (ret, score) = eval.evaluate(&l.eval_policy())?;
        rows.push(MetricsRow {
            epoch: rec.epoch,
            step: rec.step,
            mean_eval_return: ret,
            normalized_score: score,
            n_selected: rec.n_selected,
            mean_selected_value: rec.mean_selected_value,
            wall_clock_ms: if record_clock { started.elapsed().as_millis() } else { 0 },
        });
        Ok(())
    };

    let result = (|| -> Result<()> {
        if method == Method::Vanilla {
            let t = Instant::now();
            let r = run_base(&mut learner, &data.mixed, &lc, train_seed, &mut monitor);
            out.timing.training_ms = t.elapsed().as_millis();
            return r;
        }

        let train_target_learner = |out: &mut RunOutcome| -> Result<TabularCql> {
            let t = Instant::now();
            let mut tl = TabularCql::new(learner.n_states, learner.n_actions, cfg.cql.clone())?;
            if cfg.cltv.target_steps > 0 {
                let tlc = LoopConfig { epochs: 1, steps_per_epoch: cfg.cltv.target_steps, batch_size: cfg.cql.batch_size, eval_every: 0 };
                let mut quiet = |_: &TabularCql, _: &EpochRecord| Ok(());
                run_base(&mut tl, &data.target, &tlc, sub_seed(seed, "target-learner"), &mut quiet)?;
            }
            out.timing.target_learner_ms = t.elapsed().as_millis();
            Ok(tl)
        };

        let (source, target_learner) = match method {
            Method::TsOnly | Method::Cltv => {
                let t = Instant::now();
                let pair = train_classifiers(&data.source, &data.target, &cfg.classifier, sub_seed(seed, "classifiers"))?;
                out.timing.classifiers_ms = t.elapsed().as_millis();
                let t = Instant::now();
                let (scorer, scored, _) = train_ts(&data.source, &pair, &cfg.ts, sub_seed(seed, "ts"))?;
                out.timing.ts_ms = t.elapsed().as_millis();
                out.artifacts.classifiers = Some(pair);
                out.artifacts.scorer = Some(scorer.v_phi);
                let modified = modify_rewards(&scored, cfg.cltv.lambda)?;
                if method == Method::TsOnly {
                    let t = Instant::now();
                    let r = run_base(&mut learner, &concat(&modified, &data.target), &lc, train_seed, &mut monitor);
                    out.timing.training_ms = t.elapsed().as_millis();
                    return r;
                }
                (modified, train_target_learner(out)?)
            }
            Method::CltvTd | Method::CltvRs => {
                // V comes from the target-only learner, the same estimate the
                // curriculum uses for its target policy.
                let tl = train_target_learner(out)?;
                let pi = tl.actor();
                let v: Vec<f64> = (0..tl.n_states)
                    .map(|x| pi.probs(x).iter().zip(&tl.q[x * tl.n_actions..]).map(|(p, q)| p * q).sum())
                    .collect();
                let modified = if method == Method::CltvTd {
                    reward_variant_td(&data.source, &v, cfg.cltv.td_alpha, cfg.cltv.gamma)?
                } else {
                    reward_variant_rs(&data.source, &v, cfg.cltv.gamma)?
                };
                (modified, tl)
            }
            Method::Vanilla => unreachable!(),
        };
        let pi_target = target_learner.actor();

        let t = Instant::now();
        let r = run_curriculum(&mut learner, &source, &data.target, &pi_target, cfg.cltv.m_ratio, cfg.cltv.gamma, &lc, train_seed, &mut monitor);
        out.timing.training_ms = t.elapsed().as_millis();
        r
    })();
    out.rows = rows;
    out.artifacts.learner = Some(learner);
    result
}

/// Reads the `# config_hash=` line of an existing metrics file.
pub fn existing_hash(metrics: &Path) -> Result<Option<String>> {
    if !metrics.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(metrics)?;
    let first = text.lines().next().unwrap_or_default();
    Ok(first.strip_prefix("# config_hash=").map(str::to_string))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(contents)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn metrics_csv(hash: &str, outcome: &RunOutcome) -> String {
    let mut s = format!("# config_hash={hash}\n# run_id={}-seed-{}\n{METRICS_HEADER}\n", outcome.method, outcome.seed);
    for r in &outcome.rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    if let Some(e) = &outcome.error {
        let _ = writeln!(s, "aborted,,,,,,  # {}", e.replace('\n', " "));
    }
    s
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed-{seed}"))
}

/// Writes metrics, checkpoints and timing for a finished run.
pub fn write_outcome(cfg: &ExperimentConfig, dir: &Path, outcome: &RunOutcome) -> Result<()> {
    let hash = cfg.hash();
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&hash, outcome).as_bytes())?;
    if let Some(l) = &outcome.artifacts.learner {
        let env = make_env(&cfg.env)?;
        let ck = PolicyCheckpoint {
            config_hash: hash.clone(),
            env_fingerprint: env.fingerprint(),
            method: outcome.method.to_string(),
            seed: outcome.seed,
            n_states: l.n_states,
            n_actions: l.n_actions,
            q: l.q.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Parse(e.to_string()))?;
        write_atomic(&dir.join("policy.json"), text.as_bytes())?;
    }
    if let Some(pair) = &outcome.artifacts.classifiers {
        let mut buf = Vec::new();
        save_checkpoint(&pair.q_xu, Some("q_xu"), &mut buf)?;
        write_atomic(&dir.join("q_xu.json"), &buf)?;
        buf.clear();
        save_checkpoint(&pair.q_xux, Some("q_xux"), &mut buf)?;
        write_atomic(&dir.join("q_xux.json"), &buf)?;
    }
    if let Some(net) = &outcome.artifacts.scorer {
        let mut buf = Vec::new();
        save_checkpoint(net, Some("scorer"), &mut buf)?;
        write_atomic(&dir.join("scorer.json"), &buf)?;
    }
    let t = &outcome.timing;
    let timing = format!(
        "config_hash={hash}\ndata_ms={}\nclassifiers_ms={}\nts_ms={}\ntarget_learner_ms={}\ntraining_ms={}\n",
        t.data_ms, t.classifiers_ms, t.ts_ms, t.target_learner_ms, t.training_ms
    );
    write_atomic(&dir.join("timing.txt"), timing.as_bytes())?;
    Ok(())
}

/// Refuses to overwrite results produced under a different config.
pub fn check_resume(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match existing_hash(&dir.join("metrics.csv"))? {
        Some(h) if h != cfg.hash() => Err(Error::Config(format!(
            "{} was written with config hash {h}, current config hashes to {}",
            dir.display(),
            cfg.hash()
        ))),
        _ => Ok(()),
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per-seed final scores followed by a `mean±std` row.
pub fn summary_csv(hash: &str, method: Method, outcomes: &[&RunOutcome]) -> String {
    let mut s = format!("# config_hash={hash}\nmethod,seed,final_normalized_score\n");
    let mut scores = Vec::new();
    for o in outcomes {
        match o.final_score() {
            Some(x) => {
                scores.push(x);
                let _ = writeln!(s, "{method},{},{x:.6}", o.seed);
            }
            None => {
                let _ = writeln!(s, "{method},{},NaN", o.seed);
            }
        }
    }
    let (m, sd) = mean_std(&scores);
    let _ = writeln!(s, "{method},mean±std,{m:.2}±{sd:.2}");
    s
}

pub fn write_summary(cfg: &ExperimentConfig, out: &Path, method: Method, outcomes: &[&RunOutcome]) -> Result<()> {
    let dir = out.join(method.as_str());
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&cfg.hash(), method, outcomes).as_bytes())
}

/// Greedy evaluation of a saved policy on the configured target MDP.
pub fn eval_checkpoint(cfg: &ExperimentConfig, ck: &PolicyCheckpoint, seed: u64) -> Result<(f64, f64)> {
    let mdp = make_env(&cfg.env)?;
    if mdp.fingerprint() != ck.env_fingerprint {
        return Err(Error::Config(format!(
            "checkpoint was trained on env {} but the config describes {}",
            ck.env_fingerprint,
            mdp.fingerprint()
        )));
    }
    if ck.n_states != mdp.n_states() || ck.n_actions != mdp.n_actions() || ck.q.len() != ck.n_states * ck.n_actions {
        return Err(Error::DimensionMismatch { expected: mdp.n_states() * mdp.n_actions(), got: ck.q.len() });
    }
    let pol = TabularPolicy::greedy(ck.n_states, ck.n_actions, &ck.q)?;
    Evaluator::new(cfg, &mdp, seed)?.evaluate(&pol)
}
