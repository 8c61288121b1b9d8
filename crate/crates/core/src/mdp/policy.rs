use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample_categorical;
use crate::error::{Error, Result};
use crate::neural::MlpParams;

/// Softmax policy over a finite action set, stored as logits `L[x][u]`.
///
/// `-inf` logits are allowed and give zero-probability actions, which is
/// how greedy and epsilon-greedy policies are represented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch { expected: n_states * n_actions, got: logits.len() });
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        for row in logits.chunks(n_actions) {
            if row.iter().all(|l| *l == f64::NEG_INFINITY) {
                return Err(Error::InvalidArgument("a state has no action with positive probability".into()));
            }
        }
        Ok(Self { n_states, n_actions, logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    pub fn from_probs(n_states: usize, n_actions: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("negative or NaN probability".into()));
        }
        Self::from_logits(n_states, n_actions, probs.iter().map(|p| p.ln()).collect())
    }

    /// Softmax of `q / temperature`.
    pub fn softmax(n_states: usize, n_actions: usize, q: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        Self::from_logits(n_states, n_actions, q.iter().map(|v| v / temperature).collect())
    }

    /// Puts `1 - epsilon` on the first maximiser of `q` and spreads
    /// `epsilon` uniformly over all actions.
    pub fn epsilon_greedy(n_states: usize, n_actions: usize, q: &[f64], epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if q.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch { expected: n_states * n_actions, got: q.len() });
        }
        let mut probs = vec![epsilon / n_actions as f64; q.len()];
        for (x, row) in q.chunks(n_actions).enumerate() {
            probs[x * n_actions + argmax(row)] += 1.0 - epsilon;
        }
        Self::from_probs(n_states, n_actions, &probs)
    }

    pub fn greedy(n_states: usize, n_actions: usize, q: &[f64]) -> Result<Self> {
        Self::epsilon_greedy(n_states, n_actions, q, 0.0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn row(&self, x: usize) -> &[f64] {
        &self.logits[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        let row = self.row(x);
        let lse = log_sum_exp(row);
        row.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        let row = self.row(x);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Full `π(u|x)` table in `[x][u]` order.
    pub fn prob_table(&self) -> Vec<f64> {
        (0..self.n_states).flat_map(|x| self.probs(x)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs(x), rng)
    }

    /// Exact `D_KL(self(·|x) || other(·|x))`.
    pub fn kl(&self, other: &TabularPolicy, x: usize) -> Result<f64> {
        if self.n_actions != other.n_actions {
            return Err(Error::DimensionMismatch { expected: self.n_actions, got: other.n_actions });
        }
        let lp = self.log_probs(x);
        let lq = other.log_probs(x);
        let mut kl = 0.0;
        for (u, (a, b)) in lp.iter().zip(&lq).enumerate() {
            if *a == f64::NEG_INFINITY {
                continue;
            }
            if *b == f64::NEG_INFINITY {
                return Err(Error::SupportMismatch { action: u });
            }
            kl += a.exp() * (a - b);
        }
        // Rounding can leave a tiny negative value for identical rows.
        Ok(kl.max(0.0))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gaussian policy with state-dependent mean and a fixed diagonal std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: MlpParams,
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn new(mean: MlpParams, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("gaussian std {sigma} must be positive")));
        }
        Ok(Self { mean, sigma })
    }

    pub fn action_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn mean_at(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mean.predict(state)
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let normal = Normal::new(0.0, self.sigma).expect("sigma checked positive");
        Ok(self.mean_at(state)?.into_iter().map(|m| m + normal.sample(rng)).collect())
    }

    /// Closed-form KL between diagonal Gaussians, summed over action dims.
    pub fn kl(&self, other: &GaussianPolicy, state: &[f64]) -> Result<f64> {
        let m1 = self.mean_at(state)?;
        let m2 = other.mean_at(state)?;
        if m1.len() != m2.len() {
            return Err(Error::DimensionMismatch { expected: m1.len(), got: m2.len() });
        }
        let (s1, s2) = (self.sigma, other.sigma);
        let per_dim_const = (s2 / s1).ln() + s1 * s1 / (2.0 * s2 * s2) - 0.5;
        Ok(m1
            .iter()
            .zip(&m2)
            .map(|(a, b)| per_dim_const + (a - b) * (a - b) / (2.0 * s2 * s2))
            .sum::<f64>()
            .max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Tabular(TabularPolicy),
    Gaussian(GaussianPolicy),
}

#[derive(Clone, Copy, Debug)]
pub enum StateRef<'a> {
    Discrete(usize),
    Continuous(&'a [f64]),
}

pub fn policy_kl(p1: &Policy, p2: &Policy, state: StateRef<'_>) -> Result<f64> {
    match (p1, p2, state) {
        (Policy::Tabular(a), Policy::Tabular(b), StateRef::Discrete(x)) => a.kl(b, x),
        (Policy::Gaussian(a), Policy::Gaussian(b), StateRef::Continuous(s)) => a.kl(b, s),
        _ => Err(Error::InvalidArgument("policy kinds and state kind must agree".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Head};
    use proptest::prelude::*;

    #[test]
    fn identical_policies_have_zero_kl() {
        let p = TabularPolicy::from_logits(2, 3, vec![0.1, -2.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.kl(&p, 0).unwrap(), 0.0);
        assert_eq!(p.kl(&p, 1).unwrap(), 0.0);
    }

    #[test]
    fn two_action_kl_matches_closed_form() {
        let eps: f64 = 0.1;
        let p1 = TabularPolicy::from_probs(1, 2, &[1.0 - eps, eps]).unwrap();
        let p2 = TabularPolicy::from_probs(1, 2, &[eps, 1.0 - eps]).unwrap();
        let expected = (1.0 - 2.0 * eps) * ((1.0 - eps) / eps).ln();
        let got = policy_kl(&Policy::Tabular(p1), &Policy::Tabular(p2), StateRef::Discrete(0)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.7578).abs() < 1e-4);
    }

    #[test]
    fn gaussian_kl_shared_sigma() {
        let mut m1 = MlpParams::zeros(&[1, 1], Activation::Tanh, Head::Linear).unwrap();
        let mut m2 = m1.clone();
        m1.biases_mut(0)[0] = 0.0;
        m2.biases_mut(0)[0] = 0.1;
        let p1 = Policy::Gaussian(GaussianPolicy::new(m1, 0.1).unwrap());
        let p2 = Policy::Gaussian(GaussianPolicy::new(m2, 0.1).unwrap());
        let kl = policy_kl(&p1, &p2, StateRef::Continuous(&[0.3])).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn support_mismatch_is_an_error() {
        let p1 = TabularPolicy::uniform(1, 2);
        let p2 = TabularPolicy::from_probs(1, 2, &[1.0, 0.0]).unwrap();
        assert!(matches!(p1.kl(&p2, 0), Err(Error::SupportMismatch { action: 1 })));
        // The reverse direction is fine: p2 has no mass where p1 is missing.
        assert!(p2.kl(&p1, 0).is_ok());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let m = MlpParams::zeros(&[1, 1], Activation::Tanh, Head::Linear).unwrap();
        assert!(GaussianPolicy::new(m.clone(), 0.0).is_err());
        assert!(GaussianPolicy::new(m, -0.1).is_err());
    }

    #[test]
    fn epsilon_greedy_rows() {
        let q = [0.0, 2.0, 1.0, 5.0, 5.0, 0.0];
        let p = TabularPolicy::epsilon_greedy(2, 3, &q, 0.3).unwrap();
        let r0 = p.probs(0);
        assert!((r0[1] - (0.7 + 0.1)).abs() < 1e-12);
        assert!((r0[0] - 0.1).abs() < 1e-12);
        // ties go to the first maximiser
        assert!((p.probs(1)[0] - 0.8).abs() < 1e-12);
        let g = TabularPolicy::greedy(2, 3, &q).unwrap();
        assert_eq!(g.probs(0), vec![0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let p = TabularPolicy::from_logits(3, 4, logits).unwrap();
            for x in 0..3 {
                let s: f64 = p.probs(x).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_under_shift(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            shift in -10.0f64..10.0,
        ) {
            let p = TabularPolicy::from_logits(1, 4, a.clone()).unwrap();
            let q = TabularPolicy::from_logits(1, 4, b).unwrap();
            prop_assert!(p.kl(&q, 0).unwrap() >= 0.0);
            let shifted = TabularPolicy::from_logits(1, 4, a.iter().map(|v| v + shift).collect()).unwrap();
            prop_assert!(p.kl(&shifted, 0).unwrap() < 1e-12);
        }
    }
}
