//! Numerical checks of the value and policy-improvement bounds on random
//! small MDPs, using exact linear solves throughout.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{discounted_occupancy, perturb_dynamics, solve_q_values, solve_values, TabularMdp, TabularPolicy};

pub const DEFAULT_SLACK: f64 = 1e-9;
pub const DEFAULT_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub n_trials: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` that the slack had to absorb (0 if never needed).
    pub max_slack_used: f64,
    /// Smallest `rhs - lhs` over all trials.
    pub worst_gap: f64,
}

impl BoundReport {
    fn new(name: &str) -> Self {
        Self { bound_name: name.to_string(), n_trials: 0, violations: 0, max_slack_used: 0.0, worst_gap: f64::INFINITY }
    }

    /// Records one trial of `lhs <= rhs`.
    pub fn observe(&mut self, lhs: f64, rhs: f64, slack: f64) {
        self.n_trials += 1;
        let gap = rhs - lhs;
        if !(lhs <= rhs + slack) {
            self.violations += 1;
        }
        if gap < 0.0 {
            self.max_slack_used = self.max_slack_used.max(-gap);
        }
        self.worst_gap = self.worst_gap.min(gap);
    }

    pub fn merge(mut self, other: &BoundReport) -> Self {
        self.n_trials += other.n_trials;
        self.violations += other.violations;
        self.max_slack_used = self.max_slack_used.max(other.max_slack_used);
        self.worst_gap = self.worst_gap.min(other.worst_gap);
        self
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Dirichlet(1) sample via normalised exponentials.
pub fn random_distribution<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..dim).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

pub fn half_l1(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation as the largest event-probability gap, by enumerating
/// every subset of the support.
pub fn tv_by_events(p: &[f64], q: &[f64]) -> f64 {
    assert!(p.len() < 24, "event enumeration is exponential");
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << p.len()) {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..p.len() {
            if mask >> i & 1 == 1 {
                a += p[i];
                b += q[i];
            }
        }
        best = best.max((a - b).abs());
    }
    best
}

/// Random MDP with `r(x, u, x') = r(x, u)`, no terminal states.
pub fn random_mdp<R: Rng + ?Sized>(n: usize, na: usize, gamma: f64, rng: &mut R) -> Result<TabularMdp> {
    let mut transition = Vec::with_capacity(n * na * n);
    let mut reward = Vec::with_capacity(n * na * n);
    for _ in 0..n * na {
        transition.extend(random_distribution(n, rng));
        let r: f64 = rng.gen();
        reward.extend(std::iter::repeat(r).take(n));
    }
    TabularMdp::new(n, na, transition, reward, gamma, random_distribution(n, rng), vec![false; n])
}

pub fn random_policy<R: Rng + ?Sized>(n: usize, na: usize, rng: &mut R) -> Result<TabularPolicy> {
    let probs: Vec<f64> = (0..n).flat_map(|_| random_distribution(na, rng)).collect();
    TabularPolicy::from_probs(n, na, &probs)
}

fn sizes<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    (rng.gen_range(2..=6), rng.gen_range(2..=4))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_pinsker(trials: usize, seed: u64, slack: f64) -> BoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("pinsker");
    for _ in 0..trials {
        let dim = rng.gen_range(2..=8);
        let p = random_distribution(dim, &mut rng);
        let q = random_distribution(dim, &mut rng);
        rep.observe(half_l1(&p, &q), (0.5 * kl(&p, &q)).sqrt(), slack);
    }
    rep
}

/// Half the L1 distance against the event-based definition; `lhs` is the
/// absolute disagreement, `rhs` is 0.
pub fn check_tv_l1(trials: usize, seed: u64, slack: f64) -> BoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("tv_l1");
    for _ in 0..trials {
        let dim = rng.gen_range(2..=8);
        let p = random_distribution(dim, &mut rng);
        let q = random_distribution(dim, &mut rng);
        rep.observe((half_l1(&p, &q) - tv_by_events(&p, &q)).abs(), 0.0, slack);
    }
    rep
}

/// `|V - V_hat|_inf <= (|r - r_hat|_inf + gamma/(1-gamma) |p - p_hat|_inf) / (1-gamma)`.
pub fn value_estimation_terms(mdp: &TabularMdp, model: &TabularMdp, policy: &TabularPolicy) -> Result<(f64, f64)> {
    let g = mdp.gamma();
    let lhs = sup_diff(&solve_values(mdp, policy)?, &solve_values(model, policy)?);
    let dr = sup_diff(mdp.reward(), model.reward());
    let dp = sup_diff(mdp.transition(), model.transition());
    Ok((lhs, (dr + g / (1.0 - g) * dp) / (1.0 - g)))
}

pub fn check_value_estimation_bound(trials: usize, seed: u64, gamma: f64, slack: f64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("value_estimation");
    for _ in 0..trials {
        let (n, na) = sizes(&mut rng);
        let mdp = random_mdp(n, na, gamma, &mut rng)?;
        let eps: f64 = rng.gen_range(0.0..0.3);
        let reward: Vec<f64> = mdp
            .reward()
            .chunks(n)
            .flat_map(|row| {
                let r = (row[0] + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
                std::iter::repeat(r).take(n)
            })
            .collect();
        let shifted = perturb_dynamics(&mdp, rng.gen_range(0.0..1.0), rng.gen())?;
        let model = TabularMdp::new(n, na, shifted.transition().to_vec(), reward, gamma, mdp.initial_dist().to_vec(), vec![false; n])?;
        let policy = random_policy(n, na, &mut rng)?;
        let (lhs, rhs) = value_estimation_terms(&mdp, &model, &policy)?;
        rep.observe(lhs, rhs, slack);
    }
    Ok(rep)
}

/// Largest row KL `KL(p_a(.|x,u) || p_b(.|x,u))` over all (x, u).
pub fn max_row_kl(a: &TabularMdp, b: &TabularMdp) -> f64 {
    let n = a.n_states();
    a.transition().chunks(n).zip(b.transition().chunks(n)).map(|(p, q)| kl(p, q)).fold(0.0, f64::max)
}

/// Per-state KL, the worst case over actions.
pub fn state_kl(a: &TabularMdp, b: &TabularMdp) -> Vec<f64> {
    (0..a.n_states())
        .map(|x| (0..a.n_actions()).map(|u| kl(a.row(x, u), b.row(x, u))).fold(0.0, f64::max))
        .collect()
}

/// `|V_S - V_T|_inf <= gamma / (1-gamma)^2 * sqrt(KL_max / 2)`.
pub fn value_gap_terms(source: &TabularMdp, target: &TabularMdp, policy: &TabularPolicy) -> Result<(f64, f64)> {
    let g = source.gamma();
    let lhs = sup_diff(&solve_values(source, policy)?, &solve_values(target, policy)?);
    Ok((lhs, g / (1.0 - g).powi(2) * (0.5 * max_row_kl(source, target)).sqrt()))
}

fn random_pair<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<(TabularMdp, TabularMdp, TabularPolicy)> {
    let (n, na) = sizes(rng);
    let source = random_mdp(n, na, gamma, rng)?;
    let mismatch = rng.gen_range(1e-3..1.0);
    let target = perturb_dynamics(&source, mismatch, rng.gen())?;
    let policy = random_policy(n, na, rng)?;
    Ok((source, target, policy))
}

pub fn check_value_gap_bound(trials: usize, seed: u64, gamma: f64, slack: f64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("value_gap");
    for _ in 0..trials {
        let (source, target, policy) = random_pair(gamma, &mut rng)?;
        let (lhs, rhs) = value_gap_terms(&source, &target, &policy)?;
        rep.observe(lhs, rhs, slack);
    }
    Ok(rep)
}

/// `E_d[V_T] >= E_d[V_S] - gamma * eps / (1-gamma)^2` with
/// `eps = E_d[sqrt(KL(x) / 2)]`, written as `lhs = E_d[V_S] - E_d[V_T]`,
/// `rhs = gamma * eps_scale * eps / (1-gamma)^2`.
pub fn target_lower_bound_terms(
    source: &TabularMdp,
    target: &TabularMdp,
    policy: &TabularPolicy,
    d: &[f64],
    eps_scale: f64,
) -> Result<(f64, f64)> {
    let g = source.gamma();
    let vs = solve_values(source, policy)?;
    let vt = solve_values(target, policy)?;
    let eps: f64 = state_kl(source, target).iter().zip(d).map(|(k, w)| w * (0.5 * k).sqrt()).sum();
    Ok((dot(d, &vs) - dot(d, &vt), g * eps_scale * eps / (1.0 - g).powi(2)))
}

pub fn check_target_lower_bound(trials: usize, seed: u64, gamma: f64, slack: f64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("target_lower_bound");
    for _ in 0..trials {
        let (source, target, policy) = random_pair(gamma, &mut rng)?;
        let d = random_distribution(source.n_states(), &mut rng);
        let (lhs, rhs) = target_lower_bound_terms(&source, &target, &policy, &d, 1.0)?;
        rep.observe(lhs, rhs, slack);
    }
    Ok(rep)
}

/// Quantities shared by the two policy-improvement checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImprovementTerms {
    /// `E_{d_b, pi_b}[A^{pi_i}]`.
    pub advantage: f64,
    /// `E_{d_b}[TV(pi_b, pi_next)]`.
    pub tv: f64,
    /// `E_{d_b}[sqrt(KL(pi_b || pi_next))]`.
    pub sqrt_kl: f64,
    /// `(1-gamma) (V^{pi_next} - V^{pi_i})` under the initial distribution.
    pub scaled_gain: f64,
}

pub fn improvement_terms(
    mdp: &TabularMdp,
    pi_b: &TabularPolicy,
    pi_i: &TabularPolicy,
    pi_next: &TabularPolicy,
) -> Result<ImprovementTerms> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.gamma();
    let d = discounted_occupancy(mdp, pi_b, mdp.initial_dist())?;
    let qi = solve_q_values(mdp, pi_i)?;
    let v_next = solve_values(mdp, pi_next)?;
    let (mut advantage, mut tv, mut sqrt_kl) = (0.0, 0.0, 0.0);
    for x in 0..n {
        let pb = pi_b.probs(x);
        let pn = pi_next.probs(x);
        let a: f64 = (0..na).map(|u| pb[u] * (qi.q(x, u) - qi.v[x])).sum();
        advantage += d[x] * a;
        tv += d[x] * half_l1(&pb, &pn);
        sqrt_kl += d[x] * kl(&pb, &pn).sqrt();
    }
    let mu = mdp.initial_dist();
    let scaled_gain = (1.0 - g) * (dot(mu, &v_next) - dot(mu, &qi.v));
    Ok(ImprovementTerms { advantage, tv, sqrt_kl, scaled_gain })
}

fn random_triple<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<(TabularMdp, [TabularPolicy; 3])> {
    let (n, na) = sizes(rng);
    let mdp = random_mdp(n, na, gamma, rng)?;
    let pols = [random_policy(n, na, rng)?, random_policy(n, na, rng)?, random_policy(n, na, rng)?];
    Ok((mdp, pols))
}

/// `E[A] - 2/(1-gamma) E[TV] <= (1-gamma)(V^{next} - V^{i})`.
pub fn check_perf_difference(trials: usize, seed: u64, gamma: f64, slack: f64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("perf_difference");
    for _ in 0..trials {
        let (mdp, [b, i, next]) = random_triple(gamma, &mut rng)?;
        let t = improvement_terms(&mdp, &b, &i, &next)?;
        rep.observe(t.advantage - 2.0 / (1.0 - gamma) * t.tv, t.scaled_gain, slack);
    }
    Ok(rep)
}

/// `(1-gamma)(V^{next} - V^{i}) >= E[A] - sqrt(2)/(1-gamma) E[sqrt KL]`.
///
/// A trial whose KL penalty falls below its TV penalty also counts as a
/// violation.
pub fn check_policy_improvement_bound(trials: usize, seed: u64, gamma: f64, slack: f64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = BoundReport::new("policy_improvement");
    for _ in 0..trials {
        let (mdp, [b, i, next]) = random_triple(gamma, &mut rng)?;
        let t = improvement_terms(&mdp, &b, &i, &next)?;
        let kl_pen = std::f64::consts::SQRT_2 / (1.0 - gamma) * t.sqrt_kl;
        let tv_pen = 2.0 / (1.0 - gamma) * t.tv;
        let before = rep.violations;
        rep.observe(t.advantage - kl_pen, t.scaled_gain, slack);
        if kl_pen + slack < tv_pen && rep.violations == before {
            rep.violations += 1;
        }
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug)]
enum Check {
    Pinsker,
    TvL1,
    ValueEstimation,
    ValueGap,
    TargetLower,
    PerfDifference,
    PolicyImprovement,
}

const ALL_CHECKS: [Check; 7] = [
    Check::Pinsker,
    Check::TvL1,
    Check::ValueEstimation,
    Check::ValueGap,
    Check::TargetLower,
    Check::PerfDifference,
    Check::PolicyImprovement,
];

fn sub_seed(seed: u64, check: usize, gamma_idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((check as u64) << 32 | gamma_idx as u64)
}

/// Runs every check; the MDP-based ones once per discount factor.
pub fn run_all(trials: usize, seed: u64, gammas: &[f64], slack: f64) -> Result<Vec<BoundReport>> {
    ALL_CHECKS
        .par_iter()
        .enumerate()
        .map(|(ci, check)| {
            let per_gamma = |gi: usize, g: f64| -> Result<BoundReport> {
                let s = sub_seed(seed, ci, gi);
                match check {
                    Check::Pinsker => Ok(check_pinsker(trials, s, slack)),
                    Check::TvL1 => Ok(check_tv_l1(trials, s, slack)),
                    Check::ValueEstimation => check_value_estimation_bound(trials, s, g, slack),
                    Check::ValueGap => check_value_gap_bound(trials, s, g, slack),
                    Check::TargetLower => check_target_lower_bound(trials, s, g, slack),
                    Check::PerfDifference => check_perf_difference(trials, s, g, slack),
                    Check::PolicyImprovement => check_policy_improvement_bound(trials, s, g, slack),
                }
            };
            if matches!(check, Check::Pinsker | Check::TvL1) {
                return per_gamma(0, f64::NAN);
            }
            let mut reports = gammas.iter().enumerate().map(|(gi, &g)| per_gamma(gi, g));
            let first = reports.next().ok_or(Error::Empty("discount factors"))??;
            reports.try_fold(first, |acc, r| Ok(acc.merge(&r?)))
        })
        .collect()
}
