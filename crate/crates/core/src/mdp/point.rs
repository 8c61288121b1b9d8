//! One-dimensional point environment with continuous state and action.
//!
//! `s' = clip(s + clip(a, ±max_action) + drift + noise, ±1)`, reward `1 - |s'|`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Dataset, Domain, GaussianPolicy, ReturnStats, Space, Spaces, Trajectory, Transition};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEnv {
    pub noise_std: f64,
    pub drift: f64,
    pub max_action: f64,
}

impl Default for PointEnv {
    fn default() -> Self {
        Self { noise_std: 0.05, drift: 0.0, max_action: 0.25 }
    }
}

impl PointEnv {
    pub fn new(noise_std: f64, drift: f64, max_action: f64) -> Result<Self> {
        if !(noise_std >= 0.0) || !(max_action > 0.0) || !drift.is_finite() {
            return Err(Error::InvalidEnv(format!(
                "point env needs noise_std >= 0 and max_action > 0 (got {noise_std}, {max_action})"
            )));
        }
        Ok(Self { noise_std, drift, max_action })
    }

    pub fn fingerprint(&self) -> String {
        let text = format!("point:{:?}:{:?}:{:?}", self.noise_std, self.drift, self.max_action);
        super::hex16(&Sha256::digest(text.as_bytes()))
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(-1.0..1.0)
    }

    pub fn step<R: Rng + ?Sized>(&self, s: f64, a: f64, rng: &mut R) -> (f64, f64) {
        let noise = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std).expect("checked std").sample(rng)
        } else {
            0.0
        };
        let next = (s + a.clamp(-self.max_action, self.max_action) + self.drift + noise).clamp(-1.0, 1.0);
        (next, 1.0 - next.abs())
    }
}

fn check_policy(policy: &GaussianPolicy) -> Result<()> {
    if policy.mean.input_dim() != 1 || policy.action_dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: policy.action_dim() });
    }
    Ok(())
}

pub fn generate_point_dataset(
    env: &PointEnv,
    behavior: &GaussianPolicy,
    n_trajectories: usize,
    horizon: usize,
    seed: u64,
    role: Domain,
) -> Result<Dataset<Vec<f64>, Vec<f64>>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_policy(behavior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for traj_id in 0..n_trajectories {
        let mut s = env.reset(&mut rng);
        let mut transitions = Vec::with_capacity(horizon);
        for step in 1..=horizon {
            let a = behavior.sample(&[s], &mut rng)?[0];
            let (next, reward) = env.step(s, a, &mut rng);
            transitions.push(Transition {
                traj_id,
                step,
                state: vec![s],
                action: vec![a],
                next_state: vec![next],
                reward,
                domain: role,
            });
            s = next;
        }
        trajectories.push(Trajectory::new(transitions)?);
    }
    Ok(Dataset {
        trajectories,
        role,
        fingerprint: env.fingerprint(),
        spaces: Spaces { state: Space::Box(1), action: Space::Box(1) },
    })
}

/// Mean undiscounted return; `stochastic = false` acts with the policy mean.
pub fn evaluate_gaussian(
    env: &PointEnv,
    policy: &GaussianPolicy,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    stochastic: bool,
) -> Result<ReturnStats> {
    check_policy(policy)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut s = env.reset(&mut rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = if stochastic { policy.sample(&[s], &mut rng)?[0] } else { policy.mean_at(&[s])?[0] };
            let (next, r) = env.step(s, a, &mut rng);
            total += r;
            s = next;
        }
        returns.push(total);
    }
    Ok(ReturnStats::from_returns(&returns))
}
