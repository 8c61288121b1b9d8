//! Base offline RL learners and evaluation helpers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{evaluate_return, optimal_q, GaussianPolicy, TabularMdp, TabularPolicy, Transition};
use crate::neural::{Activation, Direction, Head, MlpParams, Optimizer};

/// An offline learner the curriculum can drive.
pub trait OfflineLearner {
    /// One gradient step on a batch sampled by the caller.
    fn update(&mut self, batch: &[&Transition]) -> Result<CqlLosses>;
    /// Policy used when comparing against another learner.
    fn actor(&self) -> TabularPolicy;
    /// Policy used for evaluation rollouts.
    fn eval_policy(&self) -> TabularPolicy;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqlConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub alpha_cql: f64,
    pub tau: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self { gamma: 0.99, learning_rate: 0.1, alpha_cql: 1.0, tau: 5e-3, temperature: 1.0, batch_size: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CqlLosses {
    pub td: f64,
    /// Mean of `logsumexp Q(x, .) - Q(x, u_data)` over the batch; never negative.
    pub penalty: f64,
}

/// Tabular conservative Q-learning with a Polyak-averaged target table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCql {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
    pub q_target: Vec<f64>,
    pub cfg: CqlConfig,
}

fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl TabularCql {
    pub fn new(n_states: usize, n_actions: usize, cfg: CqlConfig) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau {} outside (0, 1]", cfg.tau)));
        }
        if !(cfg.gamma >= 0.0 && cfg.gamma < 1.0) || cfg.alpha_cql < 0.0 || !(cfg.temperature > 0.0) {
            return Err(Error::InvalidArgument("cql needs gamma in [0,1), alpha >= 0, temperature > 0".into()));
        }
        if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("cql batch size and learning rate must be positive".into()));
        }
        let q = vec![0.0; n_states * n_actions];
        Ok(Self { n_states, n_actions, q_target: q.clone(), q, cfg })
    }

    fn row<'a>(&self, table: &'a [f64], x: usize) -> &'a [f64] {
        &table[x * self.n_actions..(x + 1) * self.n_actions]
    }

    /// Mean of `logsumexp Q(x, .) - Q(x, u)` over the given pairs.
    pub fn conservative_gap(&self, pairs: impl Iterator<Item = (usize, usize)>) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for (x, u) in pairs {
            let row = self.row(&self.q, x);
            total += logsumexp(row) - row[u];
            n += 1;
        }
        total / n.max(1) as f64
    }

    pub fn polyak_sync(&mut self) {
        let tau = self.cfg.tau;
        for (t, q) in self.q_target.iter_mut().zip(&self.q) {
            *t = (1.0 - tau) * *t + tau * q;
        }
    }

    /// One fitted-Q step; gradients are averaged per state so that frequent
    /// states do not get larger steps.
    pub fn cql_update(&mut self, batch: &[&Transition]) -> Result<CqlLosses> {
        if batch.is_empty() {
            return Err(Error::Empty("cql batch"));
        }
        let na = self.n_actions;
        let mut grad = vec![0.0; self.q.len()];
        let mut counts = vec![0usize; self.n_states];
        let mut losses = CqlLosses::default();
        for t in batch {
            if t.state >= self.n_states || t.next_state >= self.n_states || t.action >= na {
                return Err(Error::UnknownId(format!(
                    "transition ({}, {}, {}) outside a {}x{} table",
                    t.state, t.action, t.next_state, self.n_states, na
                )));
            }
            let next_q = self.row(&self.q_target, t.next_state);
            let pi = softmax_row(self.row(&self.q, t.next_state), self.cfg.temperature);
            let target = t.reward + self.cfg.gamma * pi.iter().zip(next_q).map(|(p, q)| p * q).sum::<f64>();
            let row = self.row(&self.q, t.state);
            let err = row[t.action] - target;
            losses.td += err * err;
            let lse = logsumexp(row);
            losses.penalty += lse - row[t.action];
            let base = t.state * na;
            grad[base + t.action] += err;
            if self.cfg.alpha_cql > 0.0 {
                for (u, p) in softmax_row(row, 1.0).into_iter().enumerate() {
                    grad[base + u] += self.cfg.alpha_cql * p;
                }
                grad[base + t.action] -= self.cfg.alpha_cql;
            }
            counts[t.state] += 1;
        }
        for x in 0..self.n_states {
            if counts[x] == 0 {
                continue;
            }
            let scale = self.cfg.learning_rate / counts[x] as f64;
            for u in 0..na {
                self.q[x * na + u] -= scale * grad[x * na + u];
            }
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q table diverged".into()));
        }
        self.polyak_sync();
        let n = batch.len() as f64;
        losses.td /= n;
        losses.penalty /= n;
        Ok(losses)
    }
}

impl OfflineLearner for TabularCql {
    fn update(&mut self, batch: &[&Transition]) -> Result<CqlLosses> {
        self.cql_update(batch)
    }

    fn actor(&self) -> TabularPolicy {
        TabularPolicy::softmax(self.n_states, self.n_actions, &self.q, self.cfg.temperature)
            .expect("finite q table")
    }

    fn eval_policy(&self) -> TabularPolicy {
        TabularPolicy::greedy(self.n_states, self.n_actions, &self.q).expect("finite q table")
    }
}

/// Draws `batch_size` indices uniformly with replacement.
pub fn sample_batch<'a, R: Rng + ?Sized>(data: &'a [Transition], batch_size: usize, rng: &mut R) -> Vec<&'a Transition> {
    (0..batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect()
}

/// Deterministic-mean actor-critic with a behaviour-cloning term, used with
/// the continuous point environment.
#[derive(Clone, Debug)]
pub struct GaussianAc {
    pub critic: MlpParams,
    pub target_critic: MlpParams,
    pub actor: GaussianPolicy,
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
    critic_opt: Optimizer,
    actor_opt: Optimizer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AcLosses {
    pub critic: f64,
    pub actor: f64,
}

impl GaussianAc {
    pub fn new(hidden: &[usize], sigma: f64, gamma: f64, tau: f64, beta: f64, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut cs = vec![2];
        cs.extend(hidden);
        cs.push(1);
        let mut asz = vec![1];
        asz.extend(hidden);
        asz.push(1);
        let critic = MlpParams::init(&cs, Activation::Tanh, Head::Linear, seed)?;
        let actor = GaussianPolicy::new(MlpParams::init(&asz, Activation::Tanh, Head::Linear, seed ^ 0x5eed)?, sigma)?;
        Ok(Self {
            target_critic: critic.clone(),
            critic,
            actor,
            gamma,
            tau,
            beta,
            critic_opt: Optimizer::adam(learning_rate)?,
            actor_opt: Optimizer::adam(learning_rate)?,
        })
    }

    /// Actor gradient of `Q(s, mu(s)) - beta (mu(s) - a)^2`, averaged over the batch.
    pub fn actor_gradient(&self, batch: &[&Transition<Vec<f64>, Vec<f64>>]) -> Result<(Vec<f64>, f64)> {
        let mut grad = vec![0.0; self.actor.mean.n_params()];
        let mut objective = 0.0;
        let n = batch.len() as f64;
        for t in batch {
            let cache = self.actor.mean.forward(&t.state)?;
            let mu = cache.output()[0];
            let qc = self.critic.forward(&[t.state[0], mu])?;
            let (_, dq_din) = self.critic.backward(&qc, &[1.0])?;
            let diff = mu - t.action[0];
            objective += qc.output()[0] - self.beta * diff * diff;
            let g = dq_din[1] - 2.0 * self.beta * diff;
            self.actor.mean.backward_into(&cache, &[g / n], &mut grad)?;
        }
        Ok((grad, objective / n))
    }

    pub fn gaussian_ac_update(&mut self, batch: &[&Transition<Vec<f64>, Vec<f64>>]) -> Result<AcLosses> {
        if batch.is_empty() {
            return Err(Error::Empty("actor-critic batch"));
        }
        let n = batch.len() as f64;
        let mut cgrad = vec![0.0; self.critic.n_params()];
        let mut critic_loss = 0.0;
        for t in batch {
            let next_mu = self.actor.mean_at(&t.next_state)?[0];
            let y = t.reward + self.gamma * self.target_critic.predict(&[t.next_state[0], next_mu])?[0];
            let cache = self.critic.forward(&[t.state[0], t.action[0]])?;
            let err = cache.output()[0] - y;
            critic_loss += err * err / n;
            self.critic.backward_into(&cache, &[2.0 * err / n], &mut cgrad)?;
        }
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {critic_loss}")));
        }
        self.critic_opt.step(self.critic.params_mut(), &cgrad, Direction::Descend)?;
        let (agrad, objective) = self.actor_gradient(batch)?;
        self.actor_opt.step(self.actor.mean.params_mut(), &agrad, Direction::Ascend)?;
        let tau = self.tau;
        for (t, c) in self.target_critic.params_mut().iter_mut().zip(self.critic.params()) {
            *t = (1.0 - tau) * *t + tau * c;
        }
        Ok(AcLosses { critic: critic_loss, actor: -objective })
    }
}

pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> Result<f64> {
    if !(expert_score > random_score) {
        return Err(Error::DegenerateReference { random: random_score, expert: expert_score });
    }
    Ok(100.0 * (score - random_score) / (expert_score - random_score))
}

/// Mean returns of the uniform policy and of the greedy optimal policy.
pub fn reference_scores(mdp: &TabularMdp, horizon: usize, n_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let uniform = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let random = evaluate_return(mdp, &uniform, n_episodes, horizon, seed)?.mean;
    let q = optimal_q(mdp, 1e-12, 1_000_000)?;
    let greedy = TabularPolicy::greedy(mdp.n_states(), mdp.n_actions(), &q.q)?;
    let expert = evaluate_return(mdp, &greedy, n_episodes, horizon, seed)?.mean;
    Ok((random, expert))
}
