//! Transition scoring: a sigmoid network `v_phi` trained with REINFORCE to
//! rate how target-like each source transition is.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{encode_xux, ClassifierPair, Encode};
use crate::error::{Error, Result};
use crate::mdp::Dataset;
use crate::neural::{log_sigmoid, Activation, Direction, Head, MlpParams, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Only `r * grad log pi`.
    ScoreFunctionOnly,
    /// Adds the pathwise gradient of the normalised reward.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsConfig {
    pub hidden: Vec<usize>,
    pub delta_mix: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub gradient_mode: GradientMode,
}

impl Default for TsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            delta_mix: 0.7,
            batch_size: 200,
            steps: 500,
            learning_rate: 1e-3,
            gradient_mode: GradientMode::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub min: f64,
    pub max: f64,
}

impl RewardBounds {
    pub fn update(bounds: Option<Self>, r: f64) -> Self {
        match bounds {
            None => Self { min: r, max: r },
            Some(b) => Self { min: b.min.min(r), max: b.max.max(r) },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScorerState {
    pub v_phi: MlpParams,
    pub delta_mix: f64,
    pub bounds: Option<RewardBounds>,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub gradient_mode: GradientMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateDiagnostics {
    pub raw_reward: f64,
    pub reward: f64,
    pub n_selected: usize,
    pub mean_score: f64,
}

/// Unnormalised batch reward `delta * sum(w * d) + (1 - delta) * sum(w)`.
pub fn batch_reward_unnormalized(scores: &[f64], deltas: &[f64], delta_mix: f64) -> f64 {
    let similarity: f64 = scores.iter().zip(deltas).map(|(w, d)| w * d).sum();
    let mass: f64 = scores.iter().sum();
    delta_mix * similarity + (1.0 - delta_mix) * mass
}

/// Maps `raw` into [-1, 1] using the running extrema; 0 while they coincide.
pub fn normalize_reward(raw: f64, bounds: RewardBounds) -> f64 {
    let span = bounds.max - bounds.min;
    if span <= 0.0 {
        return 0.0;
    }
    (2.0 * (raw - bounds.min) / span - 1.0).clamp(-1.0, 1.0)
}

/// d r / d raw for [`normalize_reward`], treating the clamp as identity.
fn normalize_slope(bounds: RewardBounds) -> f64 {
    let span = bounds.max - bounds.min;
    if span <= 0.0 {
        0.0
    } else {
        2.0 / span
    }
}

/// Log-likelihood of a selection vector under independent Bernoulli(w_j),
/// written in terms of the logits for stability.
pub fn selection_log_prob(logits: &[f64], selected: &[bool]) -> f64 {
    logits.iter().zip(selected).map(|(&z, &x)| if x { log_sigmoid(z) } else { log_sigmoid(-z) }).sum()
}

/// Per-logit gradient of `reward * log pi(x)`: `reward * (x_j - w_j)`.
pub fn score_function_logit_grad(scores: &[f64], selected: &[bool], reward: f64) -> Vec<f64> {
    scores.iter().zip(selected).map(|(w, &x)| reward * (if x { 1.0 } else { 0.0 } - w)).collect()
}

/// Per-logit gradient of the normalised reward under fixed bounds.
pub fn reward_logit_grad(scores: &[f64], deltas: &[f64], delta_mix: f64, bounds: RewardBounds) -> Vec<f64> {
    let slope = normalize_slope(bounds);
    scores
        .iter()
        .zip(deltas)
        .map(|(w, d)| slope * (delta_mix * d + 1.0 - delta_mix) * w * (1.0 - w))
        .collect()
}

impl ScorerState {
    pub fn new(input_dim: usize, cfg: &TsConfig, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.delta_mix) {
            return Err(Error::InvalidArgument(format!("delta_mix {} outside [0, 1]", cfg.delta_mix)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("ts batch size must be positive".into()));
        }
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Ok(Self {
            v_phi: MlpParams::init(&sizes, Activation::Tanh, Head::Sigmoid, seed)?,
            delta_mix: cfg.delta_mix,
            bounds: None,
            optimizer: Optimizer::adam(cfg.learning_rate)?,
            batch_size: cfg.batch_size,
            gradient_mode: cfg.gradient_mode,
        })
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(self.v_phi.predict(features)?[0])
    }

    /// One REINFORCE step on a batch of encoded transitions and their Δ.
    pub fn reinforce_update<R: Rng + ?Sized>(
        &mut self,
        features: &[&[f64]],
        deltas: &[f64],
        rng: &mut R,
    ) -> Result<UpdateDiagnostics> {
        if features.is_empty() {
            return Err(Error::Empty("ts batch"));
        }
        if features.len() != deltas.len() {
            return Err(Error::DimensionMismatch { expected: features.len(), got: deltas.len() });
        }
        let caches = features.iter().map(|f| self.v_phi.forward(f)).collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = caches.iter().map(|c| c.output()[0]).collect();
        let selected: Vec<bool> = scores.iter().map(|&w| rng.gen::<f64>() < w).collect();

        let raw = batch_reward_unnormalized(&scores, deltas, self.delta_mix);
        let pre = self.bounds.unwrap_or(RewardBounds { min: raw, max: raw });
        let reward = normalize_reward(raw, pre);
        self.bounds = Some(RewardBounds::update(self.bounds, raw));

        let mut logit_grad = score_function_logit_grad(&scores, &selected, reward);
        if self.gradient_mode == GradientMode::Full {
            for (g, p) in logit_grad.iter_mut().zip(reward_logit_grad(&scores, deltas, self.delta_mix, pre)) {
                *g += p;
            }
        }
        let mut grads = vec![0.0; self.v_phi.n_params()];
        for (cache, g) in caches.iter().zip(&logit_grad) {
            self.v_phi.backward_logits_into(cache, &[*g], &mut grads)?;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ts gradient (raw reward {raw}, reward {reward}, batch {})",
                features.len()
            )));
        }
        self.optimizer.step(self.v_phi.params_mut(), &grads, Direction::Ascend)?;
        Ok(UpdateDiagnostics {
            raw_reward: raw,
            reward,
            n_selected: selected.iter().filter(|&&x| x).count(),
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDataset<S = usize, A = usize> {
    pub base: Dataset<S, A>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TsReport {
    pub rewards: Vec<f64>,
    pub mean_scores: Vec<f64>,
    /// Exponential moving average (0.99) of the normalised reward.
    pub reward_ema: f64,
}

/// Trains a scorer on `source` and scores every source transition.
pub fn train_ts<S, A>(
    source: &Dataset<S, A>,
    pair: &ClassifierPair,
    cfg: &TsConfig,
    seed: u64,
) -> Result<(ScorerState, ScoredDataset<S, A>, TsReport)>
where
    S: Encode + Clone,
    A: Encode + Clone,
{
    if source.is_empty() {
        return Err(Error::Empty("ts source dataset"));
    }
    let spaces = source.spaces;
    let features: Vec<Vec<f64>> = source.transitions().map(|t| encode_xux(t, spaces)).collect();
    let deltas = pair.dynamics_factors(source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ScorerState::new(features[0].len(), cfg, rng.gen())?;
    let mut report = TsReport::default();

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let idx = &order[cursor..end];
        cursor = end;
        let batch: Vec<&[f64]> = idx.iter().map(|&i| features[i].as_slice()).collect();
        let d: Vec<f64> = idx.iter().map(|&i| deltas[i]).collect();
        let diag = state.reinforce_update(&batch, &d, &mut rng)?;
        report.reward_ema = if report.rewards.is_empty() { diag.reward } else { 0.99 * report.reward_ema + 0.01 * diag.reward };
        report.rewards.push(diag.reward);
        report.mean_scores.push(diag.mean_score);
    }
    let scores = features.iter().map(|f| state.score(f)).collect::<Result<Vec<_>>>()?;
    Ok((state, ScoredDataset { base: source.clone(), scores }, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(batch_reward_unnormalized(&[0.4, 0.9], &[0.0, 0.0], 1.0), 0.0);
        assert!((batch_reward_unnormalized(&[0.2, 0.3, 0.5], &[7.0, -1.0, 3.0], 0.0) - 1.0).abs() < 1e-15);
        assert!((batch_reward_unnormalized(&[0.5], &[2.0], 0.7) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn normalization_edges() {
        let b = RewardBounds { min: -2.0, max: 6.0 };
        assert_eq!(normalize_reward(-2.0, b), -1.0);
        assert_eq!(normalize_reward(6.0, b), 1.0);
        assert_eq!(normalize_reward(2.0, b), 0.0);
        assert_eq!(normalize_reward(100.0, b), 1.0);
        assert_eq!(normalize_reward(3.0, RewardBounds { min: 3.0, max: 3.0 }), 0.0);
    }

    #[test]
    fn zero_final_layer_scores_one_half() {
        let cfg = TsConfig { hidden: vec![4], ..TsConfig::default() };
        let mut s = ScorerState::new(3, &cfg, 1).unwrap();
        let last = s.v_phi.n_layers() - 1;
        s.v_phi.weights_mut(last).iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(s.score(&[0.3, 1.0, -2.0]).unwrap(), 0.5);
        assert_eq!(s.score(&[0.3, 1.0, -2.0]).unwrap(), s.score(&[0.3, 1.0, -2.0]).unwrap());
    }

    #[test]
    fn zero_reward_leaves_parameters_alone() {
        let cfg = TsConfig { hidden: vec![4], gradient_mode: GradientMode::ScoreFunctionOnly, ..TsConfig::default() };
        let mut s = ScorerState::new(2, &cfg, 3).unwrap();
        let before = s.v_phi.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // First batch: bounds collapse onto the batch reward, so r = 0.
        let diag = s.reinforce_update(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.5, -0.5], &mut rng).unwrap();
        assert_eq!(diag.reward, 0.0);
        assert_eq!(s.v_phi, before);
    }
}
