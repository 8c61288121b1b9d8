//! Trajectory valuation and the curriculum training loop.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{policy_kl, Dataset, Domain, Policy, StateRef, TabularPolicy, Trajectory, Transition};
use crate::offline::{sample_batch, OfflineLearner};
use crate::scoring::ScoredDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardVariant {
    Cltv,
    Td,
    Rs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltvConfig {
    pub lambda: f64,
    pub m_ratio: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub gamma: f64,
    pub reward_variant: RewardVariant,
    pub td_alpha: f64,
    /// Steps used to fit the target-only learner before the loop starts.
    pub target_steps: usize,
}

impl Default for CltvConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            m_ratio: 0.1,
            epochs: 10,
            steps_per_epoch: 500,
            gamma: 0.99,
            reward_variant: RewardVariant::Cltv,
            td_alpha: 0.5,
            target_steps: 5000,
        }
    }
}

impl CltvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.m_ratio > 0.0 && self.m_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("m_ratio {} outside (0, 1]", self.m_ratio)));
        }
        Ok(())
    }
}

/// `r <- (1 - lambda) r + lambda w` on every transition of the scored set.
pub fn modify_rewards<S: Clone, A: Clone>(source: &ScoredDataset<S, A>, lambda: f64) -> Result<Dataset<S, A>> {
    if source.scores.len() != source.base.n_transitions() {
        return Err(Error::DimensionMismatch { expected: source.base.n_transitions(), got: source.scores.len() });
    }
    let mut out = source.base.clone();
    for (t, w) in out.transitions_mut().zip(&source.scores) {
        t.reward = (1.0 - lambda) * t.reward + lambda * w;
    }
    Ok(out)
}

fn map_rewards(ds: &Dataset, v: &[f64], f: impl Fn(&Transition, f64, f64) -> f64) -> Result<Dataset> {
    let mut out = ds.clone();
    for t in out.transitions_mut() {
        let (vx, vn) = match (v.get(t.state), v.get(t.next_state)) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(Error::UnknownId(format!("state {} or {} has no value", t.state, t.next_state))),
        };
        t.reward = f(t, vx, vn);
    }
    Ok(out)
}

/// `r_TD = V(x) + alpha (r + gamma V(x') - V(x))`.
pub fn reward_variant_td(ds: &Dataset, v: &[f64], alpha: f64, gamma: f64) -> Result<Dataset> {
    map_rewards(ds, v, |t, vx, vn| vx + alpha * (t.reward + gamma * vn - vx))
}

/// `r_RS = gamma V(x') - V(x)`.
pub fn reward_variant_rs(ds: &Dataset, v: &[f64], gamma: f64) -> Result<Dataset> {
    map_rewards(ds, v, |_, vx, vn| gamma * vn - vx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryValue {
    pub traj_id: usize,
    pub similarity: f64,
    pub ret: f64,
    pub value: f64,
}

/// Similarity is `exp(-mean KL(pi_target || pi_source))` over visited states.
pub fn value_trajectory(traj: &Trajectory, pi_target: &TabularPolicy, pi_source: &TabularPolicy, gamma: f64) -> Result<TrajectoryValue> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut kl = 0.0;
    let mut ret = 0.0;
    let mut discount = 1.0;
    for t in traj.transitions() {
        kl += pi_target.kl(pi_source, t.state)?;
        ret += discount * t.reward;
        discount *= gamma;
    }
    let similarity = (-kl / traj.len() as f64).exp();
    Ok(TrajectoryValue { traj_id: traj.id(), similarity, ret, value: similarity * ret })
}

/// Generic form taking any pair of policies and per-step state views.
pub fn value_trajectory_with<S: Clone, A: Clone>(
    traj: &Trajectory<S, A>,
    pi_target: &Policy,
    pi_source: &Policy,
    gamma: f64,
    state: impl Fn(&S) -> StateRef<'_>,
) -> Result<TrajectoryValue> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let (mut kl, mut ret, mut discount) = (0.0, 0.0, 1.0);
    for t in traj.transitions() {
        kl += policy_kl(pi_target, pi_source, state(&t.state))?;
        ret += discount * t.reward;
        discount *= gamma;
    }
    let similarity = (-kl / traj.len() as f64).exp();
    Ok(TrajectoryValue { traj_id: traj.id(), similarity, ret, value: similarity * ret })
}

/// Ids of the best `ceil(m_ratio * K)` trajectories; ties go to the lower id.
pub fn select_top_m(values: &[TrajectoryValue], m_ratio: f64) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Empty("trajectory values"));
    }
    if !(m_ratio > 0.0 && m_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("m_ratio {m_ratio} outside (0, 1]")));
    }
    let mut sorted: Vec<&TrajectoryValue> = values.iter().collect();
    sorted.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.traj_id.cmp(&b.traj_id)));
    let k = ((m_ratio * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(sorted[..k].iter().map(|v| v.traj_id).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub n_selected: usize,
    pub mean_selected_value: f64,
}

/// Observes training progress; called after every `eval_every` steps and at
/// the end of every epoch.
pub trait Monitor<L> {
    fn record(&mut self, learner: &L, record: &EpochRecord) -> Result<()>;
}

impl<L, F: FnMut(&L, &EpochRecord) -> Result<()>> Monitor<L> for F {
    fn record(&mut self, learner: &L, record: &EpochRecord) -> Result<()> {
        self(learner, record)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoopConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Intermediate monitor calls every this many steps; 0 disables them.
    pub eval_every: usize,
}

/// Trains `learner` for `steps_per_epoch` steps on `data`, firing the monitor.
fn run_epoch<L: OfflineLearner, M: Monitor<L>>(
    learner: &mut L,
    data: &[Transition],
    lc: &LoopConfig,
    epoch: usize,
    step: &mut usize,
    n_selected: usize,
    mean_value: f64,
    rng: &mut ChaCha8Rng,
    monitor: &mut M,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in 1..=lc.steps_per_epoch {
        let batch = sample_batch(data, lc.batch_size, rng);
        learner.update(&batch)?;
        *step += 1;
        if lc.eval_every > 0 && s % lc.eval_every == 0 && s != lc.steps_per_epoch {
            monitor.record(learner, &EpochRecord { epoch, step: *step, n_selected, mean_selected_value: mean_value })?;
        }
    }
    monitor.record(learner, &EpochRecord { epoch, step: *step, n_selected, mean_selected_value: mean_value })
}

/// The base algorithm on a fixed dataset. Uses the same training stream as
/// [`run_curriculum`] so the two coincide when every trajectory is selected.
pub fn run_base<L: OfflineLearner, M: Monitor<L>>(
    learner: &mut L,
    data: &Dataset,
    lc: &LoopConfig,
    seed: u64,
    monitor: &mut M,
) -> Result<()> {
    let flat: Vec<Transition> = data.transitions().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0;
    for epoch in 1..=lc.epochs {
        run_epoch(learner, &flat, lc, epoch, &mut step, data.trajectories.len(), f64::NAN, &mut rng, monitor)?;
    }
    Ok(())
}

/// Curriculum loop: each epoch re-values every source trajectory against the
/// current learner, keeps the top share, and trains on it plus the target set.
pub fn run_curriculum<L: OfflineLearner, M: Monitor<L>>(
    learner: &mut L,
    source: &Dataset,
    target: &Dataset,
    pi_target: &TabularPolicy,
    m_ratio: f64,
    gamma: f64,
    lc: &LoopConfig,
    seed: u64,
    monitor: &mut M,
) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Empty("source dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0;
    for epoch in 1..=lc.epochs {
        let pi_source = learner.actor();
        let values = source
            .trajectories
            .iter()
            .map(|t| value_trajectory(t, pi_target, &pi_source, gamma))
            .collect::<Result<Vec<_>>>()?;
        let chosen = select_top_m(&values, m_ratio)?;
        let mut keep = vec![false; source.trajectories.len()];
        let index_of: std::collections::HashMap<usize, usize> =
            source.trajectories.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        for id in &chosen {
            keep[index_of[id]] = true;
        }
        let mean_value = values.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v.value).sum::<f64>() / chosen.len() as f64;
        let mut data: Vec<Transition> = source
            .trajectories
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .flat_map(|(t, _)| t.transitions().iter().cloned())
            .collect();
        data.extend(target.transitions().cloned());
        run_epoch(learner, &data, lc, epoch, &mut step, chosen.len(), mean_value, &mut rng, monitor)?;
    }
    Ok(())
}

/// Splits a mixed dataset into its source and target parts, keeping order.
pub fn split_by_domain(mixed: &Dataset) -> (Dataset, Dataset) {
    let mut s = mixed.filter_domain(Domain::Source);
    s.role = Domain::Source;
    let mut t = mixed.filter_domain(Domain::Target);
    t.role = Domain::Target;
    (s, t)
}
