//! Finite MDPs with explicit transition and reward tensors.
//!
//! Tensors are stored flat in `[x][u][x']` order. Terminal states are
//! absorbing self-loops with zero reward, so every solver treats them
//! without special cases.

mod data;
pub mod io;
pub mod point;
mod policy;
mod solve;

pub use data::{
    generate_dataset, mix_datasets, Dataset, Domain, Space, Spaces, Trajectory, Transition,
};
pub use policy::{policy_kl, GaussianPolicy, Policy, StateRef, TabularPolicy};
pub use solve::{
    discounted_occupancy, evaluate_return, optimal_q, policy_matrix, solve_q_values, solve_values,
    QValues, ReturnStats,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidEnv("need at least one state and one action".into()));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len {
            return Err(Error::DimensionMismatch { expected: len, got: transition.len() });
        }
        if reward.len() != len {
            return Err(Error::DimensionMismatch { expected: len, got: reward.len() });
        }
        if initial_dist.len() != n_states {
            return Err(Error::DimensionMismatch { expected: n_states, got: initial_dist.len() });
        }
        if terminal.len() != n_states {
            return Err(Error::DimensionMismatch { expected: n_states, got: terminal.len() });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidEnv(format!("gamma {gamma} outside [0, 1)")));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidEnv(format!(
                    "transition row (x={}, u={}) sums to {sum}",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidEnv("rewards must lie in [0, 1]".into()));
        }
        let init_sum: f64 = initial_dist.iter().sum();
        if initial_dist.iter().any(|&p| !(p >= 0.0)) || (init_sum - 1.0).abs() > ROW_TOL {
            return Err(Error::InvalidEnv(format!("initial distribution sums to {init_sum}")));
        }
        Ok(Self { n_states, n_actions, transition, reward, gamma, initial_dist, terminal })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal[x]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    #[inline]
    fn offset(&self, x: usize, u: usize) -> usize {
        (x * self.n_actions + u) * self.n_states
    }

    /// Next-state distribution `P[x][u][·]`.
    #[inline]
    pub fn row(&self, x: usize, u: usize) -> &[f64] {
        let o = self.offset(x, u);
        &self.transition[o..o + self.n_states]
    }

    #[inline]
    pub fn reward_row(&self, x: usize, u: usize) -> &[f64] {
        let o = self.offset(x, u);
        &self.reward[o..o + self.n_states]
    }

    #[inline]
    pub fn p(&self, x: usize, u: usize, next: usize) -> f64 {
        self.transition[self.offset(x, u) + next]
    }

    #[inline]
    pub fn r(&self, x: usize, u: usize, next: usize) -> f64 {
        self.reward[self.offset(x, u) + next]
    }

    /// `Σ_x' P(x'|x,u) r(x,u,x')`.
    pub fn expected_reward(&self, x: usize, u: usize) -> f64 {
        self.row(x, u).iter().zip(self.reward_row(x, u)).map(|(p, r)| p * r).sum()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidEnv(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    /// Replaces the transition tensor, keeping everything else.
    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transition,
            self.reward.clone(),
            self.gamma,
            self.initial_dist.clone(),
            self.terminal.clone(),
        )
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(x, u), rng)
    }

    /// Stable hex digest of every parameter; used to tie datasets and
    /// checkpoints to the environment that produced them.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        for v in self.transition.iter().chain(&self.reward).chain(&self.initial_dist) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.gamma.to_bits().to_le_bytes());
        for &t in &self.terminal {
            h.update([t as u8]);
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Inverse-CDF draw; falls back to the last positive entry on rounding.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvKind {
    /// Linear chain, actions {left, right}; start at 0, reward 1 whenever
    /// the next state is the right end.
    Chain { n: usize },
    /// Grid with actions {up, right, down, left}; start top-left, reward 1
    /// whenever the next state is the bottom-right goal.
    Grid { width: usize, height: usize },
    /// Grid whose bottom row between start (bottom-left) and goal
    /// (bottom-right) is a terminal cliff.
    Cliff { width: usize, height: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Probability mass moved from the intended move to lateral moves.
    pub slip: f64,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn chain(n: usize, slip: f64) -> Self {
        Self { kind: EnvKind::Chain { n }, slip, gamma: 0.99 }
    }

    pub fn grid(width: usize, height: usize, slip: f64) -> Self {
        Self { kind: EnvKind::Grid { width, height }, slip, gamma: 0.99 }
    }

    pub fn cliff(width: usize, height: usize, slip: f64) -> Self {
        Self { kind: EnvKind::Cliff { width, height }, slip, gamma: 0.99 }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }
}

const GRID_MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

pub fn make_env(spec: &EnvSpec) -> Result<TabularMdp> {
    if !(0.0..1.0).contains(&spec.slip) {
        return Err(Error::InvalidEnv(format!("slip {} outside [0, 1)", spec.slip)));
    }
    match spec.kind {
        EnvKind::Chain { n } => make_chain(n, spec.slip, spec.gamma),
        EnvKind::Grid { width, height } => make_grid(width, height, spec.slip, spec.gamma, false),
        EnvKind::Cliff { width, height } => {
            if width < 3 || height < 2 {
                return Err(Error::InvalidEnv(format!(
                    "cliff walk needs width >= 3 and height >= 2, got {width}x{height}"
                )));
            }
            make_grid(width, height, spec.slip, spec.gamma, true)
        }
    }
}

fn make_chain(n: usize, slip: f64, gamma: f64) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::InvalidEnv(format!("chain needs at least 2 states, got {n}")));
    }
    let goal = n - 1;
    let mut p = vec![0.0; n * 2 * n];
    let mut r = vec![0.0; n * 2 * n];
    for x in 0..n {
        for u in 0..2 {
            let target = if u == 0 { x.saturating_sub(1) } else { (x + 1).min(goal) };
            let o = (x * 2 + u) * n;
            p[o + target] += 1.0 - slip;
            p[o + x] += slip;
            r[o + goal] = 1.0;
        }
    }
    let mut init = vec![0.0; n];
    init[0] = 1.0;
    TabularMdp::new(n, 2, p, r, gamma, init, vec![false; n])
}

fn make_grid(width: usize, height: usize, slip: f64, gamma: f64, cliff: bool) -> Result<TabularMdp> {
    let n = width * height;
    if n < 2 {
        return Err(Error::InvalidEnv(format!("grid needs at least 2 states, got {width}x{height}")));
    }
    let idx = |cx: usize, cy: usize| cy * width + cx;
    let (start, goal) = if cliff {
        (idx(0, height - 1), idx(width - 1, height - 1))
    } else {
        (0, n - 1)
    };
    let mut terminal = vec![false; n];
    if cliff {
        for cx in 1..width - 1 {
            terminal[idx(cx, height - 1)] = true;
        }
    }
    let na = GRID_MOVES.len();
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na * n];
    let dest = |x: usize, m: usize| -> usize {
        let (cx, cy) = ((x % width) as i64, (x / width) as i64);
        let (dx, dy) = GRID_MOVES[m];
        let (nx, ny) = (cx + dx, cy + dy);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            x
        } else {
            idx(nx as usize, ny as usize)
        }
    };
    for x in 0..n {
        for u in 0..na {
            let o = (x * na + u) * n;
            if terminal[x] {
                p[o + x] = 1.0;
                continue;
            }
            p[o + dest(x, u)] += 1.0 - slip;
            p[o + dest(x, (u + 1) % na)] += slip / 2.0;
            p[o + dest(x, (u + 3) % na)] += slip / 2.0;
            r[o + goal] = 1.0;
        }
    }
    let mut init = vec![0.0; n];
    init[start] = 1.0;
    TabularMdp::new(n, na, p, r, gamma, init, terminal)
}

/// Mixes each non-terminal row with a seeded Dirichlet(1) row:
/// `P' = (1 - mismatch) P + mismatch R`.
pub fn perturb_dynamics(mdp: &TabularMdp, mismatch: f64, seed: u64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&mismatch) {
        return Err(Error::InvalidArgument(format!("mismatch {mismatch} outside [0, 1]")));
    }
    if mismatch == 0.0 {
        return Ok(mdp.clone());
    }
    let n = mdp.n_states;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = mdp.transition.clone();
    let mut noise = vec![0.0; n];
    for x in 0..n {
        for u in 0..mdp.n_actions {
            // Draw even for terminal rows so the noise for (x, u) does not
            // depend on which states are terminal.
            for v in noise.iter_mut() {
                let e: f64 = rng.gen::<f64>();
                *v = -(1.0 - e).ln();
            }
            if mdp.terminal[x] {
                continue;
            }
            let total: f64 = noise.iter().sum();
            let o = mdp.offset(x, u);
            let row = &mut transition[o..o + n];
            for (p, r) in row.iter_mut().zip(&noise) {
                *p = (1.0 - mismatch) * *p + mismatch * r / total;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
        }
    }
    mdp.with_transition(transition)
}

/// Mean over non-terminal rows of the total-variation distance between two
/// transition tensors of the same shape.
pub fn mean_row_tv(a: &TabularMdp, b: &TabularMdp) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for x in 0..a.n_states {
        if a.terminal[x] {
            continue;
        }
        for u in 0..a.n_actions {
            total += 0.5 * a.row(x, u).iter().zip(b.row(x, u)).map(|(p, q)| (p - q).abs()).sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_two_states_is_deterministic() {
        let mdp = make_env(&EnvSpec::chain(2, 0.0)).unwrap();
        assert!(mdp.transition().iter().all(|&p| p == 0.0 || p == 1.0));
        assert_eq!(mdp.p(0, 1, 1), 1.0);
        assert_eq!(mdp.p(1, 0, 0), 1.0);
    }

    #[test]
    fn slippery_grid_rows_are_stochastic() {
        let mdp = make_env(&EnvSpec::grid(4, 4, 0.3)).unwrap();
        for x in 0..16 {
            for u in 0..4 {
                let s: f64 = mdp.row(x, u).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn slip_changes_the_tensor() {
        let a = make_env(&EnvSpec::grid(4, 4, 0.3)).unwrap();
        let b = make_env(&EnvSpec::grid(4, 4, 0.0)).unwrap();
        let l1: f64 = a.transition().iter().zip(b.transition()).map(|(p, q)| (p - q).abs()).sum();
        // 16 states x 4 actions, each row moves 0.3 of its mass unless both
        // lateral moves bounce back onto the intended destination.
        assert!(l1 > 0.0);
        assert!(l1 <= 0.6 * 64.0 + 1e-9);
    }

    #[test]
    fn too_few_states_rejected() {
        assert!(make_env(&EnvSpec::chain(1, 0.0)).is_err());
        assert!(make_env(&EnvSpec::grid(1, 1, 0.0)).is_err());
        assert!(make_env(&EnvSpec::grid(2, 2, 1.0)).is_err());
        assert!(make_env(&EnvSpec::cliff(2, 2, 0.0)).is_err());
    }

    #[test]
    fn cliff_cells_are_absorbing() {
        let mdp = make_env(&EnvSpec::cliff(4, 3, 0.1)).unwrap();
        let cliff = 2 * 4 + 1;
        assert!(mdp.is_terminal(cliff));
        for u in 0..4 {
            assert_eq!(mdp.p(cliff, u, cliff), 1.0);
            assert_eq!(mdp.expected_reward(cliff, u), 0.0);
        }
    }

    #[test]
    fn perturb_zero_is_identity() {
        let mdp = make_env(&EnvSpec::grid(3, 3, 0.2)).unwrap();
        assert_eq!(perturb_dynamics(&mdp, 0.0, 7).unwrap(), mdp);
    }

    #[test]
    fn perturb_full_replaces_rows() {
        let mdp = make_env(&EnvSpec::grid(3, 3, 0.0)).unwrap();
        let full = perturb_dynamics(&mdp, 1.0, 7).unwrap();
        let half = perturb_dynamics(&mdp, 0.5, 7).unwrap();
        for x in 0..9 {
            for u in 0..4 {
                let s: f64 = full.row(x, u).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                // P' = 0.5 P + 0.5 R  =>  R = 2 P' - P must match the full draw.
                for k in 0..9 {
                    let r = 2.0 * half.p(x, u, k) - mdp.p(x, u, k);
                    assert!((r - full.p(x, u, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn perturb_is_reproducible_and_nonzero() {
        let mdp = make_env(&EnvSpec::grid(4, 4, 0.1)).unwrap();
        let a = perturb_dynamics(&mdp, 0.5, 11).unwrap();
        let b = perturb_dynamics(&mdp, 0.5, 11).unwrap();
        assert_eq!(a, b);
        let maxdiff = a.transition().iter().zip(mdp.transition()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(maxdiff > 0.0);
    }

    #[test]
    fn perturbation_tv_is_monotone_in_mismatch() {
        let mdp = make_env(&EnvSpec::grid(4, 4, 0.2)).unwrap();
        let levels = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0];
        for seed in 0..20 {
            let tvs: Vec<f64> = levels
                .iter()
                .map(|&m| mean_row_tv(&mdp, &perturb_dynamics(&mdp, m, seed).unwrap()))
                .collect();
            assert!(tvs.windows(2).all(|w| w[0] <= w[1] + 1e-15), "{tvs:?}");
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = make_env(&EnvSpec::grid(3, 3, 0.1)).unwrap();
        let b = make_env(&EnvSpec::grid(3, 3, 0.2)).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
