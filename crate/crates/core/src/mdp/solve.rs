use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_categorical, TabularMdp, TabularPolicy};
use crate::error::{Error, Result};

const RESIDUAL_TOL: f64 = 1e-10;

/// Action values with the matching state values `V(x) = Σ_u π(u|x) Q(x,u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QValues {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[x][u]` order.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl QValues {
    #[inline]
    pub fn q(&self, x: usize, u: usize) -> f64 {
        self.q[x * self.n_actions + u]
    }

    /// `E_{x ~ initial_dist}[V(x)]`.
    pub fn expected_value(&self, initial: &[f64]) -> f64 {
        initial.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }
}

fn check_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states() != mdp.n_states() {
        return Err(Error::DimensionMismatch { expected: mdp.n_states(), got: policy.n_states() });
    }
    if policy.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch { expected: mdp.n_actions(), got: policy.n_actions() });
    }
    Ok(())
}

/// State-to-state kernel `P_π` (row-major) and expected one-step reward `r_π`.
pub fn policy_matrix(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<(Vec<f64>, Vec<f64>)> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states();
    let mut kernel = vec![0.0; n * n];
    let mut reward = vec![0.0; n];
    for x in 0..n {
        let probs = policy.probs(x);
        for (u, pu) in probs.iter().enumerate() {
            if *pu == 0.0 {
                continue;
            }
            reward[x] += pu * mdp.expected_reward(x, u);
            for (k, p) in mdp.row(x, u).iter().enumerate() {
                kernel[x * n + k] += pu * p;
            }
        }
    }
    Ok((kernel, reward))
}

/// Solves `(I - γ P_π) V = r_π` by LU with iterative refinement.
pub fn solve_values(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    let (kernel, reward) = policy_matrix(mdp, policy)?;
    let gamma = mdp.gamma();
    let a = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - gamma * kernel[i * n + j]
    });
    let b = DVector::from_vec(reward);
    let lu = a.clone().lu();
    let mut v = lu
        .solve(&b)
        .ok_or_else(|| Error::NotConverged { iterations: 0, residual: f64::INFINITY })?;
    for _ in 0..3 {
        let r = &b - &a * &v;
        if r.amax() <= RESIDUAL_TOL * 1e-3 {
            break;
        }
        if let Some(dv) = lu.solve(&r) {
            v += dv;
        }
    }
    Ok(v.iter().copied().collect())
}

fn q_from_v(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let mut q = vec![0.0; n * na];
    for x in 0..n {
        for u in 0..na {
            q[x * na + u] = mdp
                .row(x, u)
                .iter()
                .zip(mdp.reward_row(x, u))
                .zip(v)
                .map(|((p, r), vn)| p * (r + gamma * vn))
                .sum();
        }
    }
    q
}

fn bellman_residual(mdp: &TabularMdp, policy: &TabularPolicy, q: &[f64]) -> f64 {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let v: Vec<f64> = (0..n)
        .map(|x| policy.probs(x).iter().zip(&q[x * na..(x + 1) * na]).map(|(p, qv)| p * qv).sum())
        .collect();
    let backed = q_from_v(mdp, &v);
    backed.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Exact `Q^π` for a tabular policy.
pub fn solve_q_values(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<QValues> {
    let v_lin = solve_values(mdp, policy)?;
    let mut q = q_from_v(mdp, &v_lin);
    let mut residual = bellman_residual(mdp, policy, &q);
    // A few Bellman sweeps polish any rounding left by the linear solve.
    let mut sweeps = 0;
    while residual > RESIDUAL_TOL && sweeps < 50 {
        let v = v_of(policy, &q, mdp.n_actions());
        q = q_from_v(mdp, &v);
        residual = bellman_residual(mdp, policy, &q);
        sweeps += 1;
    }
    if residual > RESIDUAL_TOL {
        return Err(Error::NotConverged { iterations: sweeps, residual });
    }
    let v = v_of(policy, &q, mdp.n_actions());
    Ok(QValues { n_states: mdp.n_states(), n_actions: mdp.n_actions(), q, v })
}

fn v_of(policy: &TabularPolicy, q: &[f64], na: usize) -> Vec<f64> {
    (0..policy.n_states())
        .map(|x| policy.probs(x).iter().zip(&q[x * na..(x + 1) * na]).map(|(p, qv)| p * qv).sum())
        .collect()
}

/// Optimal action values by value iteration; `v` holds `max_u Q(x,u)`.
pub fn optimal_q(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<QValues> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        let q = q_from_v(mdp, &v);
        let next: Vec<f64> =
            q.chunks(na).map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= tol {
            let q = q_from_v(mdp, &v);
            return Ok(QValues { n_states: n, n_actions: na, q, v });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: delta })
}

/// Normalised discounted state occupancy
/// `d(x') = (1-γ) Σ_t γ^t Pr(x_t = x' | x_0 ~ start)`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &TabularPolicy, start: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    if start.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: start.len() });
    }
    let (kernel, _) = policy_matrix(mdp, policy)?;
    let gamma = mdp.gamma();
    // d^T (I - γ P) = (1-γ) μ^T  <=>  (I - γ P)^T d = (1-γ) μ
    let a = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - gamma * kernel[j * n + i]
    });
    let b = DVector::from_iterator(n, start.iter().map(|p| (1.0 - gamma) * p));
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NotConverged { iterations: 0, residual: f64::INFINITY })?;
    Ok(d.iter().copied().collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnStats {
    pub mean: f64,
    /// Sample standard deviation (zero for a single episode).
    pub std: f64,
    pub n_episodes: usize,
}

impl ReturnStats {
    pub fn std_error(&self) -> f64 {
        self.std / (self.n_episodes as f64).sqrt()
    }

    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, std: var.sqrt(), n_episodes: n }
    }
}

/// Monte-Carlo mean and std of the undiscounted episode return.
pub fn evaluate_return(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<ReturnStats> {
    check_policy(mdp, policy)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let table = policy.prob_table();
    let na = mdp.n_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut x = mdp.sample_initial(&mut rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            if mdp.is_terminal(x) {
                break;
            }
            let u = sample_categorical(&table[x * na..(x + 1) * na], &mut rng);
            let next = mdp.sample_next(x, u, &mut rng);
            total += mdp.r(x, u, next);
            x = next;
        }
        returns.push(total);
    }
    Ok(ReturnStats::from_returns(&returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_env, EnvSpec};

    fn single_state(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![r], gamma, vec![1.0], vec![false]).unwrap()
    }

    #[test]
    fn geometric_series() {
        let mdp = single_state(1.0, 0.9);
        let q = solve_q_values(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((q.q(0, 0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zero_q() {
        let mut mdp = make_env(&EnvSpec::grid(3, 3, 0.2)).unwrap();
        mdp = TabularMdp::new(9, 4, mdp.transition().to_vec(), vec![0.0; 9 * 4 * 9], 0.9, mdp.initial_dist().to_vec(), vec![false; 9]).unwrap();
        let q = solve_q_values(&mdp, &TabularPolicy::uniform(9, 4)).unwrap();
        assert!(q.q.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn optimal_chain_values() {
        // From state 0 the goal is n-1 steps away; the first rewarded
        // transition arrives at step n-1 and the agent then stays.
        let n = 5;
        let gamma: f64 = 0.9;
        let mdp = make_env(&EnvSpec::chain(n, 0.0).with_gamma(gamma)).unwrap();
        let q = optimal_q(&mdp, 1e-13, 10_000).unwrap();
        let expected = gamma.powi(n as i32 - 2) / (1.0 - gamma);
        assert!((q.v[0] - expected).abs() < 1e-9, "{} vs {}", q.v[0], expected);
    }

    #[test]
    fn occupancy_is_a_distribution() {
        let mdp = make_env(&EnvSpec::grid(3, 3, 0.3).with_gamma(0.9)).unwrap();
        let d = discounted_occupancy(&mdp, &TabularPolicy::uniform(9, 4), mdp.initial_dist()).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|p| *p >= -1e-15));
    }

    #[test]
    fn evaluation_edge_cases() {
        let mdp = single_state(0.0, 0.5);
        let s = evaluate_return(&mdp, &TabularPolicy::uniform(1, 1), 10, 20, 3).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 0.0));

        let chain = make_env(&EnvSpec::chain(4, 0.0)).unwrap();
        let right = TabularPolicy::greedy(4, 2, &[0.0, 1.0].repeat(4)).unwrap();
        let s = evaluate_return(&chain, &right, 25, 10, 3).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.mean, 8.0);

        assert!(evaluate_return(&chain, &right, 0, 10, 3).is_err());
    }

    #[test]
    fn evaluation_is_seeded() {
        let mdp = make_env(&EnvSpec::grid(4, 4, 0.3)).unwrap();
        let p = TabularPolicy::uniform(16, 4);
        let a = evaluate_return(&mdp, &p, 50, 30, 9).unwrap();
        let b = evaluate_return(&mdp, &p, 50, 30, 9).unwrap();
        assert_eq!(a, b);
    }
}
