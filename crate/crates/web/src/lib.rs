//! Browser bindings: every exported function takes plain numbers and returns
//! a JSON string, so the page needs no generated type glue.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cltv::classifiers::{train_classifiers, ClassifierConfig};
use cltv::mdp::{generate_dataset, make_env, mean_row_tv, optimal_q, perturb_dynamics, Dataset, Domain, EnvSpec, TabularPolicy};
use cltv::scoring::{train_ts, TsConfig};
use cltv::theory::{self, BoundReport};

#[derive(Serialize)]
struct DynamicsView {
    width: usize,
    height: usize,
    mean_row_tv: f64,
    /// Optimal state values on the unperturbed grid.
    v_target: Vec<f64>,
    v_source: Vec<f64>,
    /// Greedy action per state (0 up, 1 right, 2 down, 3 left).
    greedy_target: Vec<usize>,
    greedy_source: Vec<usize>,
}

#[derive(Serialize)]
struct ScoreView {
    mean_score_target_dynamics: f64,
    mean_score_source_dynamics: f64,
    mean_delta_target_dynamics: f64,
    mean_delta_source_dynamics: f64,
    rewards: Vec<f64>,
    mean_scores: Vec<f64>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn greedy(q: &[f64], na: usize) -> Vec<usize> {
    q.chunks(na)
        .map(|row| row.iter().enumerate().fold(0, |best, (u, v)| if *v > row[best] { u } else { best }))
        .collect()
}

pub fn dynamics_view(width: usize, height: usize, slip: f64, mismatch: f64, gamma: f64, seed: u64) -> cltv::Result<String> {
    let target = make_env(&EnvSpec::grid(width, height, slip).with_gamma(gamma))?;
    let source = perturb_dynamics(&target, mismatch, seed)?;
    let qt = optimal_q(&target, 1e-10, 100_000)?;
    let qs = optimal_q(&source, 1e-10, 100_000)?;
    Ok(to_json(&DynamicsView {
        width,
        height,
        mean_row_tv: mean_row_tv(&source, &target),
        greedy_target: greedy(&qt.q, target.n_actions()),
        greedy_source: greedy(&qs.q, source.n_actions()),
        v_target: qt.v,
        v_source: qs.v,
    }))
}

pub fn bounds_view(trials: usize, seed: u64, gamma: f64) -> cltv::Result<String> {
    let slack = theory::DEFAULT_SLACK;
    let reports: Vec<BoundReport> = vec![
        theory::check_pinsker(trials, seed, slack),
        theory::check_tv_l1(trials, seed, slack),
        theory::check_value_estimation_bound(trials, seed, gamma, slack)?,
        theory::check_value_gap_bound(trials, seed, gamma, slack)?,
        theory::check_target_lower_bound(trials, seed, gamma, slack)?,
        theory::check_perf_difference(trials, seed, gamma, slack)?,
        theory::check_policy_improvement_bound(trials, seed, gamma, slack)?,
    ];
    Ok(to_json(&reports))
}

/// Half of the source set follows the slippery grid, half the clean target
/// grid; the scorer should rank the second half higher.
pub fn score_view(source_slip: f64, delta: f64, steps: usize, seed: u64) -> cltv::Result<String> {
    let target_mdp = make_env(&EnvSpec::grid(4, 4, 0.0))?;
    let slip_mdp = make_env(&EnvSpec::grid(4, 4, source_slip))?;
    let uniform = TabularPolicy::uniform(16, 4);
    let target = generate_dataset(&target_mdp, &uniform, 40, 20, seed, Domain::Target)?;
    let slippery = generate_dataset(&slip_mdp, &uniform, 20, 20, seed + 1, Domain::Source)?;
    let clean = generate_dataset(&target_mdp, &uniform, 20, 20, seed + 2, Domain::Source)?;
    let n_slippery = slippery.n_transitions();
    let mut source: Dataset = slippery;
    source.trajectories.extend(clean.trajectories);

    let ccfg = ClassifierConfig { hidden: vec![16], learning_rate: 3e-3, epochs: 20, ..ClassifierConfig::default() };
    let pair = train_classifiers(&source, &target, &ccfg, seed)?;
    let tcfg = TsConfig { hidden: vec![16], delta_mix: delta, steps, batch_size: 100, ..TsConfig::default() };
    let (_, scored, report) = train_ts(&source, &pair, &tcfg, seed)?;
    let deltas = pair.dynamics_factors(&source)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    Ok(to_json(&ScoreView {
        mean_score_source_dynamics: mean(&scored.scores[..n_slippery]),
        mean_score_target_dynamics: mean(&scored.scores[n_slippery..]),
        mean_delta_source_dynamics: mean(&deltas[..n_slippery]),
        mean_delta_target_dynamics: mean(&deltas[n_slippery..]),
        rewards: report.rewards,
        mean_scores: report.mean_scores,
    }))
}

fn or_error(r: cltv::Result<String>) -> String {
    r.unwrap_or_else(|e| error_json(&e.to_string()))
}

/// Optimal values and greedy arrows for a grid and its perturbed copy.
#[wasm_bindgen]
pub fn dynamics(width: usize, height: usize, slip: f64, mismatch: f64, gamma: f64, seed: u32) -> String {
    or_error(dynamics_view(width, height, slip, mismatch, gamma, seed as u64))
}

/// Runs every bound check on `trials` random instances.
#[wasm_bindgen]
pub fn bounds(trials: usize, seed: u32, gamma: f64) -> String {
    or_error(bounds_view(trials, seed as u64, gamma))
}

/// Trains classifiers and a scorer on a small grid pair.
#[wasm_bindgen]
pub fn score(source_slip: f64, delta: f64, steps: usize, seed: u32) -> String {
    or_error(score_view(source_slip, delta, steps, seed as u64))
}
