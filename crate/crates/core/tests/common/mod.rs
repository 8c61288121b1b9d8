#![allow(dead_code)]

use cltv::mdp::TabularMdp;
use cltv::neural::sigmoid;
use cltv::scoring::{score_function_logit_grad, selection_log_prob};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense random MDP with rewards in [0, 1] and a uniform start.
pub fn random_mdp<R: Rng>(n: usize, na: usize, gamma: f64, rng: &mut R) -> TabularMdp {
    let mut p = vec![0.0; n * na * n];
    for row in p.chunks_mut(n) {
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = -(1.0 - rng.gen::<f64>()).ln();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    let r: Vec<f64> = (0..n * na * n).map(|_| rng.gen()).collect();
    TabularMdp::new(n, na, p, r, gamma, vec![1.0 / n as f64; n], vec![false; n]).unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}

/// Index of the category drawn with probabilities `p`.
pub fn draw<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub struct Discrimination {
    pub mean_score_clean: f64,
    pub mean_score_slippery: f64,
    /// Share of well-supported transitions with |Δ - oracle| <= 0.5.
    pub within_half: f64,
    pub mean_delta_error: f64,
    pub max_delta_error: f64,
    pub n_checked: usize,
}

/// 4x4 grid, uniform behaviour. The source holds 2000 slip-0.3 and 2000
/// slip-0.0 transitions; the target holds 2000 slip-0.0 transitions.
///
/// Well-supported means both conditional probabilities are at least 0.05.
pub fn ts_discrimination(seed: u64) -> Discrimination {
    use cltv::classifiers::{train_classifiers, ClassifierConfig};
    use cltv::mdp::{generate_dataset, make_env, Domain, EnvSpec, TabularPolicy};
    use cltv::scoring::{train_ts, TsConfig};

    let clean = make_env(&EnvSpec::grid(4, 4, 0.0)).unwrap();
    let slippery = make_env(&EnvSpec::grid(4, 4, 0.3)).unwrap();
    let uniform = TabularPolicy::uniform(16, 4);
    let gen = |mdp, s, role| generate_dataset(mdp, &uniform, 100, 20, s, role).unwrap();
    let target = gen(&clean, seed * 10 + 1, Domain::Target);
    let mut source = gen(&slippery, seed * 10 + 2, Domain::Source);
    let n_slippery = source.n_transitions();
    source.trajectories.extend(gen(&clean, seed * 10 + 3, Domain::Source).trajectories);
    assert_eq!((n_slippery, source.n_transitions()), (2000, 4000));

    let ccfg = ClassifierConfig { hidden: vec![32, 32], learning_rate: 1e-2, epochs: 50, ..ClassifierConfig::default() };
    let pair = train_classifiers(&source, &target, &ccfg, seed).unwrap();
    let tcfg = TsConfig { delta_mix: 0.7, batch_size: 200, steps: 3000, learning_rate: 1e-3, ..TsConfig::default() };
    let (_, scored, _) = train_ts(&source, &pair, &tcfg, seed).unwrap();

    // The source conditional mixes both grids in proportion to how often
    // each half visited (x, u).
    let mut visits = vec![[0.0f64; 2]; 64];
    for (i, t) in source.transitions().enumerate() {
        visits[t.state * 4 + t.action][usize::from(i >= n_slippery)] += 1.0;
    }
    let deltas = pair.dynamics_factors(&source).unwrap();
    let mut errors = Vec::new();
    for (t, d) in source.transitions().zip(&deltas) {
        let [a, b] = visits[t.state * 4 + t.action];
        let pt = clean.p(t.state, t.action, t.next_state);
        let ps = (a * slippery.p(t.state, t.action, t.next_state) + b * pt) / (a + b);
        if pt >= 0.05 && ps >= 0.05 {
            let e = (d - (pt / ps).ln()).abs();
            errors.push(e);
        }
    }
    Discrimination {
        mean_score_clean: mean(&scored.scores[n_slippery..]),
        mean_score_slippery: mean(&scored.scores[..n_slippery]),
        within_half: errors.iter().filter(|&&e| e <= 0.5).count() as f64 / errors.len() as f64,
        mean_delta_error: mean(&errors),
        max_delta_error: errors.iter().copied().fold(0.0, f64::max),
        n_checked: errors.len(),
    }
}

/// Worst relative error between backprop and central differences over 50
/// random networks, for parameter and input gradients of `g . output`.
pub fn worst_gradient_error(seed: u64) -> f64 {
    use cltv::neural::{Activation, Head, MlpParams};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut sizes = vec![rng.gen_range(1..=6)];
        for _ in 0..rng.gen_range(0..=2) {
            sizes.push(rng.gen_range(2..=10));
        }
        let head = [Head::Linear, Head::Sigmoid, Head::Softmax][rng.gen_range(0..3)];
        sizes.push(if head == Head::Sigmoid { 1 } else { rng.gen_range(1..=4) });
        let act = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        // Random biases too, so no ReLU sits exactly on its kink.
        let mut net = MlpParams::init(&sizes, act, head, 0).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = rng.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |n: &MlpParams, input: &[f64]| -> f64 {
            n.predict(input).unwrap().iter().zip(&g).map(|(o, w)| o * w).sum()
        };
        let cache = net.forward(&x).unwrap();
        let (grad_p, grad_x) = net.backward(&cache, &g).unwrap();
        for i in 0..net.n_params() {
            let (mut up, mut down) = (net.clone(), net.clone());
            up.params_mut()[i] += h;
            down.params_mut()[i] -= h;
            worst = worst.max(rel((objective(&up, &x) - objective(&down, &x)) / (2.0 * h), grad_p[i]));
        }
        for i in 0..x.len() {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            worst = worst.max(rel((objective(&net, &up) - objective(&net, &down)) / (2.0 * h), grad_x[i]));
        }
    }
    worst
}

/// A reward that depends on which transitions were drawn.
pub fn selection_reward(x: &[bool]) -> f64 {
    let d = [1.5, -0.4, 0.9];
    let s: f64 = x.iter().zip(d).map(|(&b, d)| if b { d } else { 0.0 }).sum();
    s + if x[0] && x[2] { 0.7 } else { 0.0 }
}

fn expected_reward(logits: &[f64; 3]) -> f64 {
    (0..8u8)
        .map(|k| [k & 1 != 0, k & 2 != 0, k & 4 != 0])
        .map(|x| selection_log_prob(logits, &x).exp() * selection_reward(&x))
        .sum()
}

/// Per-logit (sample mean, standard error, exact gradient) of the REINFORCE
/// estimator on three transitions, against the 8-outcome expectation.
pub fn reinforce_vs_exhaustive(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let logits = [0.3, -1.1, 0.8];
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let h = 1e-6;
    let exact: Vec<f64> = (0..3)
        .map(|j| {
            let (mut up, mut down) = (logits, logits);
            up[j] += h;
            down[j] -= h;
            (expected_reward(&up) - expected_reward(&down)) / (2.0 * h)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let x: Vec<bool> = scores.iter().map(|&w| rng.gen::<f64>() < w).collect();
        let g = score_function_logit_grad(&scores, &x, selection_reward(&x));
        for j in 0..3 {
            samples[j].push(g[j]);
        }
    }
    (0..3).map(|j| (mean(&samples[j]), std_error(&samples[j]), exact[j])).collect()
}
