use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex16, TabularMdp, TabularPolicy};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// `n` ids, one-hot encoded for networks.
    Discrete(usize),
    /// Real vector of the given length.
    Box(usize),
}

impl Space {
    /// Width of the network encoding.
    pub fn encoded_dim(&self) -> usize {
        match *self {
            Space::Discrete(n) | Space::Box(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spaces {
    pub state: Space,
    pub action: Space,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<S = usize, A = usize> {
    pub traj_id: usize,
    /// 1-based position inside the trajectory.
    pub step: usize,
    pub state: S,
    pub action: A,
    pub next_state: S,
    pub reward: f64,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S = usize, A = usize> {
    transitions: Vec<Transition<S, A>>,
}

impl<S: PartialEq, A> Trajectory<S, A> {
    /// Checks step numbering and next-state chaining.
    pub fn new(transitions: Vec<Transition<S, A>>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let id = transitions[0].traj_id;
        for (i, t) in transitions.iter().enumerate() {
            if t.step != i + 1 || t.traj_id != id {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {id}: transition {i} has step {} and traj_id {}",
                    t.step, t.traj_id
                )));
            }
        }
        for w in transitions.windows(2) {
            if w[0].next_state != w[1].state {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {id}: next_state of step {} does not match the following state",
                    w[0].step
                )));
            }
        }
        Ok(Self { transitions })
    }
}

impl<S, A> Trajectory<S, A> {
    pub fn id(&self) -> usize {
        self.transitions[0].traj_id
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition<S, A>] {
        &self.transitions
    }

    pub fn transitions_mut(&mut self) -> &mut [Transition<S, A>] {
        &mut self.transitions
    }

    fn with_id(mut self, id: usize) -> Self {
        for t in &mut self.transitions {
            t.traj_id = id;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S = usize, A = usize> {
    pub trajectories: Vec<Trajectory<S, A>>,
    pub role: Domain,
    pub fingerprint: String,
    pub spaces: Spaces,
}

impl<S: Clone, A: Clone> Dataset<S, A> {
    pub fn empty(role: Domain, fingerprint: String, spaces: Spaces) -> Self {
        Self { trajectories: Vec::new(), role, fingerprint, spaces }
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition<S, A>> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn transitions_mut(&mut self) -> impl Iterator<Item = &mut Transition<S, A>> {
        self.trajectories.iter_mut().flat_map(|t| t.transitions.iter_mut())
    }

    /// Trajectories whose transitions all carry `domain`, in order. A mixed
    /// dataset splits back into its two inputs this way.
    pub fn filter_domain(&self, domain: Domain) -> Self {
        Self {
            trajectories: self
                .trajectories
                .iter()
                .filter(|t| t.transitions.iter().all(|tr| tr.domain == domain))
                .cloned()
                .collect(),
            role: domain,
            fingerprint: self.fingerprint.clone(),
            spaces: self.spaces,
        }
    }

    pub fn count_domain(&self, domain: Domain) -> usize {
        self.transitions().filter(|t| t.domain == domain).count()
    }
}

/// Rolls out `behavior` on `mdp`; episodes stop early when a terminal state
/// is entered.
pub fn generate_dataset(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    n_trajectories: usize,
    horizon: usize,
    seed: u64,
    role: Domain,
) -> Result<Dataset> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: mdp.n_states() * mdp.n_actions(),
            got: behavior.n_states() * behavior.n_actions(),
        });
    }
    let spaces = Spaces { state: Space::Discrete(mdp.n_states()), action: Space::Discrete(mdp.n_actions()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = behavior.prob_table();
    let na = mdp.n_actions();
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for traj_id in 0..n_trajectories {
        let mut x = mdp.sample_initial(&mut rng);
        // An episode that starts in a terminal state has nothing to record;
        // resample so every trajectory is non-empty.
        let mut guard = 0;
        while mdp.is_terminal(x) {
            x = mdp.sample_initial(&mut rng);
            guard += 1;
            if guard > 10_000 {
                return Err(Error::InvalidEnv("initial distribution only covers terminal states".into()));
            }
        }
        let mut transitions = Vec::with_capacity(horizon);
        for step in 1..=horizon {
            let u = super::sample_categorical(&table[x * na..(x + 1) * na], &mut rng);
            let next = mdp.sample_next(x, u, &mut rng);
            transitions.push(Transition {
                traj_id,
                step,
                state: x,
                action: u,
                next_state: next,
                reward: mdp.r(x, u, next),
                domain: role,
            });
            x = next;
            if mdp.is_terminal(x) {
                break;
            }
        }
        trajectories.push(Trajectory { transitions });
    }
    Ok(Dataset { trajectories, role, fingerprint: mdp.fingerprint(), spaces })
}

/// Combines whole trajectories from both inputs so that the share of source
/// transitions is as close as possible to `source_frac`.
///
/// The side that limits the mix is used in full; the other side contributes
/// a prefix of its trajectories (in order). Ties round towards including
/// more source data. Output ids are renumbered: source first, then target.
pub fn mix_datasets<S: Clone, A: Clone>(
    source: &Dataset<S, A>,
    target: &Dataset<S, A>,
    source_frac: f64,
) -> Result<Dataset<S, A>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("dataset passed to mix_datasets"));
    }
    if !(source_frac > 0.0 && source_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("source_frac {source_frac} outside (0, 1)")));
    }
    if source.spaces != target.spaces {
        return Err(Error::InvalidArgument("source and target spaces differ".into()));
    }
    let (ns, nt) = (source.n_transitions() as f64, target.n_transitions() as f64);
    let (take_source, take_target) = if ns / (ns + nt) >= source_frac {
        let want = nt * source_frac / (1.0 - source_frac);
        (prefix_count(&source.trajectories, want, true), target.trajectories.len())
    } else {
        let want = ns * (1.0 - source_frac) / source_frac;
        (source.trajectories.len(), prefix_count(&target.trajectories, want, false))
    };

    let mut trajectories = Vec::with_capacity(take_source + take_target);
    for t in source.trajectories[..take_source].iter().chain(&target.trajectories[..take_target]) {
        let id = trajectories.len();
        trajectories.push(t.clone().with_id(id));
    }
    let mut h = Sha256::new();
    h.update(source.fingerprint.as_bytes());
    h.update(b"|");
    h.update(target.fingerprint.as_bytes());
    h.update(source_frac.to_bits().to_le_bytes());
    Ok(Dataset { trajectories, role: Domain::Source, fingerprint: hex16(&h.finalize()), spaces: source.spaces })
}

/// Number of leading trajectories whose total length is closest to `want`.
fn prefix_count<S, A>(trajs: &[Trajectory<S, A>], want: f64, prefer_more: bool) -> usize {
    let mut count = 0usize;
    let mut total = 0.0;
    for t in trajs {
        let next = total + t.len() as f64;
        let (err_stop, err_take) = ((want - total).abs(), (next - want).abs());
        let take = if prefer_more { err_take <= err_stop } else { err_take < err_stop };
        if !take {
            break;
        }
        total = next;
        count += 1;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_env, EnvSpec};

    fn single_steps(n: usize, domain: Domain) -> Dataset {
        let trajectories = (0..n)
            .map(|i| {
                Trajectory::new(vec![Transition {
                    traj_id: i,
                    step: 1,
                    state: i % 3,
                    action: 0,
                    next_state: (i + 1) % 3,
                    reward: 0.5,
                    domain,
                }])
                .unwrap()
            })
            .collect();
        Dataset {
            trajectories,
            role: domain,
            fingerprint: "f".into(),
            spaces: Spaces { state: Space::Discrete(3), action: Space::Discrete(1) },
        }
    }

    #[test]
    fn ninety_ten_mix() {
        let mixed = mix_datasets(&single_steps(900, Domain::Source), &single_steps(100, Domain::Target), 0.9).unwrap();
        assert_eq!(mixed.n_transitions(), 1000);
        assert_eq!(mixed.count_domain(Domain::Source), 900);
    }

    #[test]
    fn even_mix() {
        let mixed = mix_datasets(&single_steps(40, Domain::Source), &single_steps(40, Domain::Target), 0.5).unwrap();
        assert_eq!(mixed.count_domain(Domain::Source), 40);
        assert_eq!(mixed.count_domain(Domain::Target), 40);
    }

    #[test]
    fn mix_rejects_empty() {
        let empty = Dataset::empty(Domain::Target, "f".into(), single_steps(1, Domain::Source).spaces);
        assert!(mix_datasets(&single_steps(5, Domain::Source), &empty, 0.9).is_err());
        assert!(mix_datasets(&single_steps(5, Domain::Source), &single_steps(5, Domain::Target), 1.0).is_err());
    }

    #[test]
    fn zero_trajectories() {
        let mdp = make_env(&EnvSpec::grid(3, 3, 0.1)).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(9, 4), 0, 10, 1, Domain::Source).unwrap();
        assert!(ds.is_empty());
        assert!(generate_dataset(&mdp, &TabularPolicy::uniform(9, 4), 1, 0, 1, Domain::Source).is_err());
    }

    #[test]
    fn deterministic_rollouts_repeat() {
        let mdp = make_env(&EnvSpec::chain(5, 0.0)).unwrap();
        let right = TabularPolicy::greedy(5, 2, &[0.0, 1.0].repeat(5)).unwrap();
        let ds = generate_dataset(&mdp, &right, 4, 6, 3, Domain::Target).unwrap();
        let first: Vec<_> = ds.trajectories[0].transitions().iter().map(|t| (t.state, t.action, t.next_state)).collect();
        for t in &ds.trajectories {
            let seq: Vec<_> = t.transitions().iter().map(|t| (t.state, t.action, t.next_state)).collect();
            assert_eq!(seq, first);
        }
    }

    #[test]
    fn cliff_episodes_end_on_terminal() {
        let mdp = make_env(&EnvSpec::cliff(5, 3, 0.2)).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(15, 4), 200, 40, 5, Domain::Source).unwrap();
        let mut shorter = 0;
        for t in &ds.trajectories {
            Trajectory::new(t.transitions().to_vec()).unwrap();
            let last = t.transitions().last().unwrap();
            if t.len() < 40 {
                shorter += 1;
                assert!(mdp.is_terminal(last.next_state));
            }
        }
        assert!(shorter > 0);
    }

    #[test]
    fn broken_chain_rejected() {
        let mk = |step, state, next_state| Transition {
            traj_id: 0,
            step,
            state,
            action: 0usize,
            next_state,
            reward: 0.0,
            domain: Domain::Source,
        };
        assert!(Trajectory::new(vec![mk(1, 0, 1), mk(2, 1, 2)]).is_ok());
        assert!(Trajectory::new(vec![mk(1, 0, 1), mk(2, 2, 0)]).is_err());
        assert!(Trajectory::new(vec![mk(1, 0, 1), mk(3, 1, 2)]).is_err());
    }
}
