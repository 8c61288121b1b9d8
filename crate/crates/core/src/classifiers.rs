//! Domain classifiers `q_xu` and `q_xux` and the dynamics factor built from them.
//!
//! Both networks output P(target | ·). Training draws half of every batch
//! from each dataset, so the class priors are equal and cancel in the
//! dynamics factor.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Dataset, Space, Spaces, Transition};
use crate::neural::{bce_with_logits, sigmoid, Activation, Direction, Head, MlpParams, Optimizer};

pub const PROB_CLAMP: f64 = 1e-12;

/// Writes a state or action into a feature vector.
pub trait Encode {
    fn encode_into(&self, space: Space, out: &mut Vec<f64>);
}

impl Encode for usize {
    fn encode_into(&self, space: Space, out: &mut Vec<f64>) {
        let start = out.len();
        out.resize(start + space.encoded_dim(), 0.0);
        out[start + *self] = 1.0;
    }
}

impl Encode for Vec<f64> {
    fn encode_into(&self, _space: Space, out: &mut Vec<f64>) {
        out.extend_from_slice(self);
    }
}

pub fn encode_xu<S: Encode, A: Encode>(t: &Transition<S, A>, spaces: Spaces) -> Vec<f64> {
    let mut v = Vec::with_capacity(spaces.state.encoded_dim() + spaces.action.encoded_dim());
    t.state.encode_into(spaces.state, &mut v);
    t.action.encode_into(spaces.action, &mut v);
    v
}

pub fn encode_xux<S: Encode, A: Encode>(t: &Transition<S, A>, spaces: Spaces) -> Vec<f64> {
    let mut v = encode_xu(t, spaces);
    t.next_state.encode_into(spaces.state, &mut v);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Total batch size; half comes from each domain.
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], activation: Activation::Tanh, learning_rate: 3e-4, batch_size: 128, epochs: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPair {
    pub q_xu: MlpParams,
    pub q_xux: MlpParams,
    pub spaces: Spaces,
    /// Exchanges the meaning of "target" and "source".
    pub swapped: bool,
    /// Mean per-example cross-entropy of the last epoch, (q_xu, q_xux).
    pub final_losses: (f64, f64),
}

/// `(P(target), P(source))`, each clamped away from 0 and 1.
fn class_probs(logit: f64, swapped: bool) -> (f64, f64) {
    let t = sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let s = (1.0 - t).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if swapped {
        (s, t)
    } else {
        (t, s)
    }
}

/// Dynamics factor as a difference of two log-odds.
///
/// Exchanging every target probability with its source counterpart negates
/// the result exactly.
pub fn delta_log_ratio(xux: (f64, f64), xu: (f64, f64)) -> f64 {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c(xux.0).ln() - c(xux.1).ln()) - (c(xu.0).ln() - c(xu.1).ln())
}

/// Same quantity summed term by term.
pub fn delta_expanded(xux: (f64, f64), xu: (f64, f64)) -> f64 {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    c(xux.0).ln() - c(xu.0).ln() - c(xux.1).ln() + c(xu.1).ln()
}

impl ClassifierPair {
    pub fn swap_roles(&self) -> Self {
        Self { swapped: !self.swapped, ..self.clone() }
    }

    pub fn probs_xu(&self, features_xu: &[f64]) -> Result<(f64, f64)> {
        Ok(class_probs(self.q_xu.logits(features_xu)?[0], self.swapped))
    }

    pub fn probs_xux(&self, features_xux: &[f64]) -> Result<(f64, f64)> {
        Ok(class_probs(self.q_xux.logits(features_xux)?[0], self.swapped))
    }

    /// Δ for one transition; both algebraic forms are computed and must agree.
    pub fn dynamics_factor<S: Encode, A: Encode>(&self, t: &Transition<S, A>) -> Result<f64> {
        let xu = self.probs_xu(&encode_xu(t, self.spaces))?;
        let xux = self.probs_xux(&encode_xux(t, self.spaces))?;
        let d = delta_log_ratio(xux, xu);
        let e = delta_expanded(xux, xu);
        if (d - e).abs() > 1e-9 {
            return Err(Error::NonFinite(format!("dynamics factor forms disagree: {d} vs {e}")));
        }
        Ok(d)
    }

    pub fn dynamics_factors<S: Encode + Clone, A: Encode + Clone>(&self, ds: &Dataset<S, A>) -> Result<Vec<f64>> {
        ds.transitions().map(|t| self.dynamics_factor(t)).collect()
    }
}

fn train_one(
    net: &mut MlpParams,
    target: &[Vec<f64>],
    source: &[Vec<f64>],
    cfg: &ClassifierConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let half = (cfg.batch_size / 2).max(1);
    let steps_per_epoch = target.len().max(source.len()).div_ceil(half);
    let mut opt = Optimizer::adam(cfg.learning_rate)?;
    let mut grads = vec![0.0; net.n_params()];
    let mut last_epoch_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for _ in 0..steps_per_epoch {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for _ in 0..half {
                for (pool, label) in [(target, 1.0), (source, 0.0)] {
                    let x = &pool[rng.gen_range(0..pool.len())];
                    let cache = net.forward(x)?;
                    let (loss, g) = bce_with_logits(cache.logits()[0], label);
                    batch_loss += loss;
                    net.backward_logits_into(&cache, &[g / (2 * half) as f64], &mut grads)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss {batch_loss}")));
            }
            epoch_loss += batch_loss;
            count += 2 * half;
            opt.step(net.params_mut(), &grads, Direction::Descend)?;
        }
        last_epoch_loss = epoch_loss / count as f64;
    }
    Ok(last_epoch_loss)
}

/// Trains both classifiers with label 1 for target samples.
pub fn train_classifiers<S, A>(
    source: &Dataset<S, A>,
    target: &Dataset<S, A>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierPair>
where
    S: Encode + Clone,
    A: Encode + Clone,
{
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("classifier training data"));
    }
    if source.spaces != target.spaces {
        return Err(Error::InvalidArgument("source and target spaces differ".into()));
    }
    let spaces = source.spaces;
    let xu_dim = spaces.state.encoded_dim() + spaces.action.encoded_dim();
    let xux_dim = xu_dim + spaces.state.encoded_dim();
    let sizes = |input: usize| {
        let mut s = vec![input];
        s.extend(&cfg.hidden);
        s.push(1);
        s
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q_xu = MlpParams::init(&sizes(xu_dim), cfg.activation, Head::Sigmoid, rng.gen())?;
    let mut q_xux = MlpParams::init(&sizes(xux_dim), cfg.activation, Head::Sigmoid, rng.gen())?;

    let feats = |ds: &Dataset<S, A>, f: fn(&Transition<S, A>, Spaces) -> Vec<f64>| {
        ds.transitions().map(|t| f(t, spaces)).collect::<Vec<_>>()
    };
    let l_xu = train_one(&mut q_xu, &feats(target, encode_xu), &feats(source, encode_xu), cfg, &mut rng)?;
    let l_xux = train_one(&mut q_xux, &feats(target, encode_xux), &feats(source, encode_xux), cfg, &mut rng)?;
    Ok(ClassifierPair { q_xu, q_xux, spaces, swapped: false, final_losses: (l_xu, l_xux) })
}

/// Area under the ROC curve for "positive scores above negative scores",
/// counting ties as one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Empty("auc input"));
    }
    let mut all: Vec<(f64, bool)> =
        positive.iter().map(|&v| (v, true)).chain(negative.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank-sum with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|p| p.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Share of samples on the correct side of 0.5.
pub fn accuracy(positive: &[f64], negative: &[f64]) -> f64 {
    let hits = positive.iter().filter(|&&p| p > 0.5).count() + negative.iter().filter(|&&p| p < 0.5).count();
    hits as f64 / (positive.len() + negative.len()).max(1) as f64
}
